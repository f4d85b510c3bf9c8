"""Block-partitioned multi-client LTI systems.

The joint model is

    h^t = A h^{t-1} + B u^{t-1} + w^{t-1},    w ~ N(0, Q)
    y^t = C h^t + v^t,                        v ~ N(0, R)

with ``C`` block-diagonal over clients. Client indices are 0-based in code.

Array conventions used throughout the package:

* ``states``        shape (T+1, P), row t is h^t for t = 0..T
* ``inputs``        shape (T, U),   row t is u^t for t = 0..T-1
* ``measurements``  shape (T, D),   row t-1 is y^t for t = 1..T
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import substream

AXES = ("state", "input", "measurement")
SYSTEM_FORMAT = "fedlti.system/1"


@dataclass(frozen=True)
class BlockPartition:
    """Per-client state, input and measurement dimensions."""

    state_dims: tuple[int, ...]
    input_dims: tuple[int, ...]
    measurement_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "measurement_dims", tuple(int(d) for d in self.measurement_dims))
        dims = (self.state_dims, self.input_dims, self.measurement_dims)
        if len(self.state_dims) < 1:
            raise ValueError("partition needs at least one client")
        if len({len(d) for d in dims}) != 1:
            raise ValueError("state, input and measurement dims must list the same clients")
        if any(d < 1 for group in dims for d in group):
            raise ValueError("every per-client dimension must be >= 1")

    @classmethod
    def uniform(cls, clients: int, state: int, inputs: int, measurements: int) -> "BlockPartition":
        return cls((state,) * clients, (inputs,) * clients, (measurements,) * clients)

    @property
    def client_count(self) -> int:
        return len(self.state_dims)

    @property
    def P(self) -> int:
        return sum(self.state_dims)

    @property
    def U(self) -> int:
        return sum(self.input_dims)

    @property
    def D(self) -> int:
        return sum(self.measurement_dims)

    def dims(self, axis: str) -> tuple[int, ...]:
        if axis == "state":
            return self.state_dims
        if axis == "input":
            return self.input_dims
        if axis == "measurement":
            return self.measurement_dims
        raise ValueError(f"unknown axis role {axis!r}; expected one of {AXES}")

    def offsets(self, axis: str) -> tuple[int, ...]:
        """Start index of each client along ``axis`` (strictly increasing)."""
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.dims(axis))[:-1]]))

    def slice(self, axis: str, m: int) -> slice:
        self._check_client(m)
        start = self.offsets(axis)[m]
        return slice(start, start + self.dims(axis)[m])

    def _check_client(self, m: int) -> None:
        if not 0 <= m < self.client_count:
            raise IndexError(f"client index {m} out of range for {self.client_count} clients")

    def to_dict(self) -> dict:
        return {
            "state_dims": list(self.state_dims),
            "input_dims": list(self.input_dims),
            "measurement_dims": list(self.measurement_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockPartition":
        return cls(d["state_dims"], d["input_dims"], d["measurement_dims"])


def extract_block(
    matrix: np.ndarray,
    partition: BlockPartition,
    axis_roles: tuple[str, str],
    m: int,
    n: int,
) -> np.ndarray:
    """Return the (m, n) block of ``matrix``.

    ``axis_roles`` names what the rows and columns index, e.g.
    ``("state", "state")`` for A, ``("state", "input")`` for B and
    ``("measurement", "state")`` for C.
    """
    rows, cols = axis_roles
    matrix = np.asarray(matrix)
    expected = (sum(partition.dims(rows)), sum(partition.dims(cols)))
    if matrix.shape != expected:
        raise ValueError(f"matrix shape {matrix.shape} does not match partition {expected}")
    return matrix[partition.slice(rows, m), partition.slice(cols, n)].copy()


def assemble_blocks(
    blocks: dict[tuple[int, int], np.ndarray],
    partition: BlockPartition,
    axis_roles: tuple[str, str],
) -> np.ndarray:
    """Inverse of :func:`extract_block`; missing blocks are zero."""
    rows, cols = axis_roles
    out = np.zeros((sum(partition.dims(rows)), sum(partition.dims(cols))))
    for (m, n), block in blocks.items():
        out[partition.slice(rows, m), partition.slice(cols, n)] = block
    return out


def spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0


@dataclass(frozen=True)
class GlobalSystem:
    partition: BlockPartition
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        p = self.partition
        shapes = {
            "A": (p.P, p.P),
            "B": (p.P, p.U),
            "C": (p.D, p.P),
            "Q": (p.P, p.P),
            "R": (p.D, p.D),
        }
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for m in range(p.client_count):
            for n in range(p.client_count):
                if m != n and np.any(self.block("C", m, n) != 0.0):
                    raise ValueError("C must be block-diagonal over clients")
        for name in ("Q", "R"):
            cov = getattr(self, name)
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def client_count(self) -> int:
        return self.partition.client_count

    def block(self, name: str, m: int, n: int) -> np.ndarray:
        roles = {
            "A": ("state", "state"),
            "B": ("state", "input"),
            "C": ("measurement", "state"),
            "Q": ("state", "state"),
            "R": ("measurement", "measurement"),
        }[name]
        return extract_block(getattr(self, name), self.partition, roles, m, n)

    def local(self, m: int) -> "LocalBlocks":
        """The blocks client ``m`` is assumed to know."""
        return LocalBlocks(
            A=self.block("A", m, m),
            B=self.block("B", m, m),
            C=self.block("C", m, m),
            Q=self.block("Q", m, m),
            R=self.block("R", m, m),
        )

    def is_stable(self) -> bool:
        return spectral_radius(self.A) < 1.0

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def mat(a: np.ndarray) -> dict:
            return {"shape": list(a.shape), "data": [float(x) for x in a.ravel(order="C")]}

        return {
            "format": SYSTEM_FORMAT,
            "partition": self.partition.to_dict(),
            "seed": self.seed,
            **{name: mat(getattr(self, name)) for name in ("A", "B", "C", "Q", "R")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalSystem":
        if d.get("format") != SYSTEM_FORMAT:
            raise ValueError(f"unsupported system format {d.get('format')!r}")

        def mat(entry: dict) -> np.ndarray:
            return np.array(entry["data"], dtype=float).reshape(entry["shape"])

        return cls(
            partition=BlockPartition.from_dict(d["partition"]),
            seed=d.get("seed"),
            **{name: mat(d[name]) for name in ("A", "B", "C", "Q", "R")},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GlobalSystem":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LocalBlocks:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray


def _orthonormal_block(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Gaussian block with all singular values equal to one."""
    g = rng.standard_normal((rows, cols))
    if rows <= cols:
        q, _ = np.linalg.qr(g.T)
        return q.T
    q, _ = np.linalg.qr(g)
    return q


def generate_stable_system(
    partition: BlockPartition,
    seed: int,
    spectral_target: float = 0.9,
    coupling_mask: np.ndarray | Sequence[Sequence[bool]] | None = None,
    input_mask: np.ndarray | Sequence[Sequence[bool]] | None = None,
    input_scale: float = 0.3,
    process_noise: float = 0.01,
    measurement_noise: float = 0.01,
) -> GlobalSystem:
    """Sample a random stable block system.

    A is dense standard normal, zeroed on masked-out client blocks and rescaled
    so its spectral radius equals ``spectral_target``. B entries are
    N(0, input_scale^2). Each C_mm has unit singular values.

    Parameters
    ----------
    coupling_mask:
        M x M booleans; ``coupling_mask[m][n] = False`` forces A_mn = 0.
        Diagonal entries must be True.
    input_mask:
        Same for the B blocks.
    """
    if not 0.0 < spectral_target < 1.0:
        raise ValueError(f"spectral_target must lie in (0, 1), got {spectral_target}")
    M = partition.client_count
    masks = []
    for mask in (coupling_mask, input_mask):
        mask = np.ones((M, M), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != (M, M):
            raise ValueError(f"mask shape {mask.shape} does not match {M} clients")
        if not np.all(np.diag(mask)):
            raise ValueError("diagonal blocks cannot be masked out")
        masks.append(mask)
    a_mask, b_mask = masks

    p = partition
    A = substream(seed, "system", "A").standard_normal((p.P, p.P))
    B = input_scale * substream(seed, "system", "B").standard_normal((p.P, p.U))
    for m in range(M):
        for n in range(M):
            if not a_mask[m, n]:
                A[p.slice("state", m), p.slice("state", n)] = 0.0
            if not b_mask[m, n]:
                B[p.slice("state", m), p.slice("input", n)] = 0.0
    rho = spectral_radius(A)
    if rho > 0:
        A *= spectral_target / rho

    rng_c = substream(seed, "system", "C")
    C = assemble_blocks(
        {(m, m): _orthonormal_block(rng_c, p.measurement_dims[m], p.state_dims[m]) for m in range(M)},
        p,
        ("measurement", "state"),
    )
    return GlobalSystem(
        partition=p,
        A=A,
        B=B,
        C=C,
        Q=process_noise * np.eye(p.P),
        R=measurement_noise * np.eye(p.D),
        seed=seed,
    )


@dataclass(frozen=True)
class InterventionSpec:
    """do(u_client^time = value)."""

    client: int
    time: int
    value: np.ndarray


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    measurements: np.ndarray
    partition: BlockPartition
    seed: int | None = None
    interventions: list[InterventionSpec] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    def client_states(self, m: int) -> np.ndarray:
        return self.states[:, self.partition.slice("state", m)]

    def client_inputs(self, m: int) -> np.ndarray:
        return self.inputs[:, self.partition.slice("input", m)]

    def client_measurements(self, m: int) -> np.ndarray:
        return self.measurements[:, self.partition.slice("measurement", m)]

    def to_csv(self, path: str | Path) -> None:
        """One row per t = 0..T; absent entries (u^T, y^0) are left empty."""
        p = self.partition
        header = (
            ["t"]
            + [f"h{i}" for i in range(p.P)]
            + [f"u{i}" for i in range(p.U)]
            + [f"y{i}" for i in range(p.D)]
        )
        T = self.horizon
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(T + 1):
                u = [repr(float(x)) for x in self.inputs[t]] if t < T else [""] * p.U
                y = [repr(float(x)) for x in self.measurements[t - 1]] if t > 0 else [""] * p.D
                writer.writerow([t] + [repr(float(x)) for x in self.states[t]] + u + y)

    @classmethod
    def from_csv(cls, path: str | Path, partition: BlockPartition) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        p = partition
        states = np.array([[float(x) for x in r[1 : 1 + p.P]] for r in rows])
        inputs = np.array([[float(x) for x in r[1 + p.P : 1 + p.P + p.U]] for r in rows[:-1]])
        meas = np.array([[float(x) for x in r[1 + p.P + p.U :]] for r in rows[1:]])
        return cls(states=states, inputs=inputs.reshape(-1, p.U), measurements=meas.reshape(-1, p.D), partition=p)


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gaussian_inputs(partition: BlockPartition, horizon: int, seed: int) -> np.ndarray:
    """i.i.d. N(0, 1) inputs, one substream per client."""
    cols = [substream(seed, "inputs", m).standard_normal((horizon, d)) for m, d in enumerate(partition.input_dims)]
    return np.hstack(cols)


def simulate(
    system: GlobalSystem,
    horizon: int,
    seed: int,
    inputs: np.ndarray | str | None = "gaussian",
    interventions: Iterable[InterventionSpec] = (),
    initial_state: np.ndarray | None = None,
) -> Trajectory:
    """Simulate the joint system for ``horizon`` steps.

    Noise is drawn from streams that do not depend on the inputs, so two calls
    with the same seed share their noise realisation (common random numbers).
    An intervention on (client n, time t) overwrites u_n^t before the update
    of h^{t+1}.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = system.partition
    if inputs is None or isinstance(inputs, str):
        if inputs not in (None, "gaussian"):
            raise ValueError(f"unknown input distribution {inputs!r}")
        u = gaussian_inputs(p, horizon, seed)
    else:
        u = np.array(inputs, dtype=float)
        if u.shape != (horizon, p.U):
            raise ValueError(f"inputs have shape {u.shape}, expected {(horizon, p.U)}")

    interventions = list(interventions)
    for iv in interventions:
        if not 0 <= iv.client < p.client_count:
            raise IndexError(f"intervention client {iv.client} out of range")
        if not 0 <= iv.time < horizon:
            raise IndexError(f"intervention time {iv.time} outside [0, {horizon})")
        value = np.asarray(iv.value, dtype=float).reshape(-1)
        if value.shape != (p.input_dims[iv.client],):
            raise ValueError("intervention value has the wrong dimension")
        u[iv.time, p.slice("input", iv.client)] = value

    w = substream(seed, "noise", "process").standard_normal((horizon, p.P)) @ _noise_factor(system.Q).T
    v = substream(seed, "noise", "measurement").standard_normal((horizon, p.D)) @ _noise_factor(system.R).T

    h = np.zeros((horizon + 1, p.P))
    if initial_state is not None:
        h[0] = initial_state
    A, B, C = system.A, system.B, system.C
    for t in range(1, horizon + 1):
        h[t] = A @ h[t - 1] + B @ u[t - 1] + w[t - 1]
    y = h[1:] @ C.T + v
    return Trajectory(states=h, inputs=u, measurements=y, partition=p, seed=seed, interventions=interventions)
