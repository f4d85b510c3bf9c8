"""Benchmark presets, seeded experiment runs and scalability sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DivergenceError
from .federation import RoundConfig, TrainingHistory, prepare_data, run_training
from .systems import BlockPartition, GlobalSystem, Trajectory, generate_stable_system, simulate

# Step sizes found by hand on the two-client benchmark; stable on seeds 0-9.
BENCHMARK_TRAINING = {
    "eta1": 0.003,
    "eta2": 0.01,
    "gamma1": 0.002,
    "gamma2": 0.05,
    "alpha_A": 0.01,
    "alpha_B": 0.05,
    "xi": 10.0,
    "max_iterations": 2000,
    "precondition": True,
}

# Large-penalty run: augmented-Lagrangian warm start, then xi = 100 with
# steps shrunk roughly by the growth in curvature.
STATIONARITY_TRAINING = {
    "eta1": 0.0003,
    "eta2": 0.001,
    "gamma1": 0.002,
    "gamma2": 0.05,
    "alpha_A": 0.001,
    "alpha_B": 0.05,
    "xi": 100.0,
    "al_warm_start": 500,
    "rho": 20.0,
    "max_iterations": 2000,
    "precondition": True,
}

# Published scalability figures, emitted next to our numbers for context only.
REFERENCE_CLIENTS = {2: (0.0744, 0.0013), 4: (0.0412, 0.0010), 8: (0.1714, 0.0036), 16: (0.3825, 0.0069)}
REFERENCE_MEASUREMENTS = {16: (0.7649, 0.0034), 32: (1.0987, 0.0041), 64: (1.4243, 0.0046), 128: (1.1805, 0.0047)}


@dataclass
class SystemSpec:
    clients: int = 2
    state: int = 2
    inputs: int = 2
    measurements: int = 2
    horizon: int = 2000
    spectral_target: float = 0.9
    # zero the A_01 block, as in the two-client benchmark
    decouple_first_pair: bool = True

    def partition(self) -> BlockPartition:
        return BlockPartition.uniform(self.clients, self.state, self.inputs, self.measurements)

    def coupling_mask(self) -> np.ndarray:
        mask = np.ones((self.clients, self.clients), dtype=bool)
        if self.decouple_first_pair and self.clients >= 2:
            mask[0, 1] = False
        return mask

    def build(self, seed: int) -> tuple[GlobalSystem, Trajectory]:
        system = generate_stable_system(self.partition(), seed, self.spectral_target, self.coupling_mask())
        return system, simulate(system, self.horizon, seed)


@dataclass
class RunResult:
    seed: int
    initial_L_s: float
    final_L_s: float
    initial_D: float
    final_D: float
    final_L_ma: list[float]
    baseline: list[float]
    initial_delta_d: list[float]
    final_delta_d: list[float]
    error: str | None = None
    history: TrainingHistory | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("history")
        return out


def run_single(spec: SystemSpec, training: dict, seed: int) -> RunResult:
    """Generate, simulate and train one seeded instance; divergence is recorded, not raised."""
    system, traj = spec.build(seed)
    data = prepare_data(system, traj)
    config = RoundConfig.from_dict({**training, "seed": seed})
    try:
        history = run_training(data, config)
    except DivergenceError as exc:
        nan = float("nan")
        return RunResult(seed, nan, nan, nan, nan, [], [], [], [], error=str(exc))
    first, last = history.records[0], history.final
    return RunResult(
        seed,
        first.L_s,
        last.L_s,
        first.disentanglement,
        last.disentanglement,
        last.L_ma.tolist(),
        last.baseline.tolist(),
        first.delta_d.tolist(),
        last.delta_d.tolist(),
        history=history,
    )


def run_benchmark(spec: SystemSpec, training: dict, seeds: Sequence[int]) -> list[RunResult]:
    return [run_single(spec, training, s) for s in seeds]


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class SweepRow:
    axis: str  # "M" or "D_m"
    value: int
    L_s_mean: float
    D_mean: float
    L_s_std: float
    D_std: float
    D_reduction_min: float  # smallest D_init / D_final over the cell's runs
    runs: int
    failures: int
    kind: str = "measured"


def _cell(axis: str, value: int, results: Sequence[RunResult]) -> SweepRow:
    ok = [r for r in results if r.ok]
    L = np.array([r.final_L_s for r in ok])
    D = np.array([r.final_D for r in ok])
    red = [r.initial_D / r.final_D if r.final_D > 0 else float("inf") for r in ok]
    nan = float("nan")
    return SweepRow(
        axis,
        value,
        float(L.mean()) if ok else nan,
        float(D.mean()) if ok else nan,
        float(L.std()) if ok else nan,
        float(D.std()) if ok else nan,
        float(min(red)) if red else nan,
        len(results),
        len(results) - len(ok),
    )


def _run_cell(args) -> RunResult:
    spec, training, seed = args
    result = run_single(spec, training, seed)
    result.history = None  # keep worker results small
    return result


def run_sweep(
    axis: str,
    values: Iterable[int],
    base: SystemSpec,
    training: dict,
    seeds: Sequence[int],
    cache_dir: str | Path | None = None,
    jobs: int = 1,
) -> list[SweepRow]:
    """Train every (value, seed) cell and aggregate per value.

    With ``cache_dir`` every finished cell is stored as ``<hash>.json`` and
    reused on the next call, so an interrupted sweep resumes where it stopped.
    ``jobs > 1`` trains pending cells in worker processes; results do not
    depend on the worker count.
    """
    if axis not in ("M", "D_m"):
        raise ValueError("axis must be 'M' or 'D_m'")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    values = [int(v) for v in values]
    cells: dict[tuple[int, int], RunResult] = {}
    pending = []
    for value in values:
        spec = SystemSpec(**{**asdict(base), ("clients" if axis == "M" else "measurements"): value})
        for seed in seeds:
            key = config_hash({"spec": asdict(spec), "training": training, "seed": seed})
            path = cache / f"{key}.json" if cache is not None else None
            if path is not None and path.exists():
                cells[value, seed] = RunResult(**json.loads(path.read_text(encoding="utf-8")))
            else:
                pending.append(((value, seed), path, (spec, training, seed)))

    tasks = [task for _, _, task in pending]
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 and len(pending) > 1 else None
    try:
        finished = pool.map(_run_cell, tasks) if pool is not None else map(_run_cell, tasks)
        # cells are written as they finish so an interrupted sweep keeps its progress
        for (cell, path, _), result in zip(pending, finished):
            if path is not None:
                path.write_text(json.dumps(result.to_dict(), sort_keys=True), encoding="utf-8")
            cells[cell] = result
    finally:
        if pool is not None:
            pool.shutdown()
    return [_cell(axis, value, [cells[value, seed] for seed in seeds]) for value in values]


def reference_rows(axis: str, values: Iterable[int]) -> list[SweepRow]:
    table = REFERENCE_CLIENTS if axis == "M" else REFERENCE_MEASUREMENTS
    nan = float("nan")
    return [SweepRow(axis, v, *table[v], nan, nan, nan, 0, 0, kind="reference") for v in values if v in table]


SWEEP_COLUMNS = ["kind", "axis", "value", "L_s", "D", "L_s_std", "D_std", "D_reduction_min", "runs", "failures"]


def write_sweep_table(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.kind, r.axis, r.value, repr(r.L_s_mean), repr(r.D_mean), repr(r.L_s_std), repr(r.D_std), repr(r.D_reduction_min), r.runs, r.failures]
            )


def write_benchmark_summary(path: str | Path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        M = max((len(r.final_L_ma) for r in results), default=0)
        header = ["seed", "status", "initial_L_s", "final_L_s", "initial_D", "final_D"]
        for m in range(M):
            header += [f"L_ma_{m}", f"baseline_{m}", f"initial_delta_d_{m}", f"final_delta_d_{m}"]
        writer.writerow(header)
        for r in results:
            line = [r.seed, "ok" if r.ok else r.error, repr(r.initial_L_s), repr(r.final_L_s), repr(r.initial_D), repr(r.final_D)]
            for m in range(len(r.final_L_ma)):
                line += [repr(r.final_L_ma[m]), repr(r.baseline[m]), repr(r.initial_delta_d[m]), repr(r.final_delta_d[m])]
            writer.writerow(line)
