"""Synchronous federated training rounds.

One round k:

1. every client runs its augmented model and uploads a :class:`ClientMessage`;
2. the server evaluates L_s, updates the off-diagonal blocks and returns
   per-client state gradients in a :class:`ServerMessage`;
3. every client combines local and chain-rule gradients and updates
   (theta, phi).

Messages cross a :class:`Boundary`, which counts transmitted values, keeps
the transcript and, when privacy is enabled, clips and perturbs each payload
before the recipient reads it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import (
    AugmentedParams,
    LearningRates,
    augmented_forward,
    chain_rule_server_gradients,
    client_local_gradients,
    update_params,
)
from .diagnostics import delta_d
from .errors import ConfigError, DivergenceError
from .estimation import FilterRun, KalmanBelief, run_proprietary_filter
from .privacy import (
    BudgetLedger,
    ClipConfig,
    PipelineSetup,
    PrivacyConfig,
    SensitivityBounds,
    analytic_bounds,
    clip_rows,
    gaussian_perturb,
    required_sigma,
)
from .rng import substream
from .server import (
    ALState,
    ClientUpload,
    CrossBlockEstimates,
    DiagonalBlocks,
    al_dual_update,
    al_loss_and_grads,
    disentanglement_gaps,
    server_gradients,
    server_loss,
    update_blocks,
)
from .systems import BlockPartition, GlobalSystem, LocalBlocks, Trajectory

MODES = ("penalty", "augmented_lagrangian")
THETA_GRADS = ("proposition", "algorithm1")


# -- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class ClientMessage:
    """Upload of client m in round k; rows are t = 1..T.

    ``h_hat_c`` and ``u`` (rows \\hat h^{t-1}_{m,c} and u^{t-1}_m) are only
    sent in round 0 because they never change.
    """

    client: int
    round: int
    h_a: np.ndarray
    h_hat_a: np.ndarray
    h_hat_c: np.ndarray | None = None
    u: np.ndarray | None = None

    def __post_init__(self) -> None:
        has_static = self.h_hat_c is not None and self.u is not None
        if self.round == 0 and not has_static:
            raise ValueError("round-0 messages must carry h_hat_c and u")

    def fields(self) -> list[np.ndarray]:
        parts = [self.h_hat_c, self.h_hat_a, self.h_a, self.u]
        return [p for p in parts if p is not None]

    @property
    def size(self) -> int:
        return sum(p.size for p in self.fields())


@dataclass(frozen=True)
class ServerMessage:
    """Gradients of L_s w.r.t. h^t_{m,a} and \\hat h^{t-1}_{m,a}, rows t = 1..T."""

    client: int
    round: int
    g_h: np.ndarray
    g_hhat: np.ndarray

    def __post_init__(self) -> None:
        if self.g_h.shape != self.g_hhat.shape:
            raise ValueError("g_h and g_hhat must have equal shapes")

    @property
    def size(self) -> int:
        return self.g_h.size + self.g_hhat.size


# -- configuration -------------------------------------------------------------


@dataclass
class RoundConfig:
    max_iterations: int = 1000
    tol: float = 0.0
    rates: LearningRates = field(default_factory=LearningRates)
    alpha_A: float = 1e-2
    alpha_B: float = 1e-2
    xi: float | list[float] = 1.0
    mode: str = "penalty"
    theta_grad: str = "proposition"
    dp: PrivacyConfig | None = None
    seed: int = 0
    rho: float = 20.0
    # run this many augmented-Lagrangian rounds before switching to ``mode``
    al_warm_start: int = 0
    snapshot_stride: int = 0
    client_order: list[int] | None = None
    # divide theta and Ahat steps by the curvature scale of their regressors
    precondition: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.theta_grad not in THETA_GRADS:
            raise ConfigError(f"theta_grad must be one of {THETA_GRADS}")
        if self.alpha_A < 0 or self.alpha_B < 0:
            raise ConfigError("server learning rates must be non-negative")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.al_warm_start < 0 or self.snapshot_stride < 0:
            raise ConfigError("al_warm_start and snapshot_stride must be >= 0")
        if np.any(np.asarray(self.xi, dtype=float) < 0):
            raise ConfigError("xi must be non-negative")

    def uses_al(self, iteration: int) -> bool:
        return self.mode == "augmented_lagrangian" or iteration < self.al_warm_start

    def to_dict(self) -> dict:
        out = {
            "max_iterations": self.max_iterations,
            "tol": self.tol,
            "eta1": self.rates.eta1,
            "eta2": self.rates.eta2,
            "gamma1": self.rates.gamma1,
            "gamma2": self.rates.gamma2,
            "alpha_A": self.alpha_A,
            "alpha_B": self.alpha_B,
            "xi": self.xi,
            "mode": self.mode,
            "theta_grad": self.theta_grad,
            "seed": self.seed,
            "rho": self.rho,
            "al_warm_start": self.al_warm_start,
            "snapshot_stride": self.snapshot_stride,
            "client_order": self.client_order,
            "precondition": self.precondition,
            "dp": None if self.dp is None else dict(vars(self.dp)),
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RoundConfig":
        data = dict(data)
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        rates = LearningRates(
            data.pop("eta1", 1e-2), data.pop("eta2", 1e-2), data.pop("gamma1", 1e-2), data.pop("gamma2", 1e-2)
        )
        dp = data.pop("dp", None)
        if dp is not None:
            dp_known = set(vars(PrivacyConfig()))
            if set(dp) - dp_known:
                raise ConfigError(f"unknown privacy keys: {sorted(set(dp) - dp_known)}")
            dp = PrivacyConfig(**dp)
        return cls(rates=rates, dp=dp, **data)


# -- data and state ------------------------------------------------------------


@dataclass
class ClientData:
    blocks: LocalBlocks
    measurements: np.ndarray  # y^1..y^T
    inputs: np.ndarray  # u^0..u^{T-1}
    filter: FilterRun

    @property
    def baseline_loss(self) -> float:
        return self.filter.residual_loss()


@dataclass
class FederatedData:
    partition: BlockPartition
    clients: list[ClientData]

    @property
    def horizon(self) -> int:
        return self.clients[0].measurements.shape[0]

    @property
    def diag(self) -> list[DiagonalBlocks]:
        return [DiagonalBlocks(c.blocks.A, c.blocks.B) for c in self.clients]


def prepare_data(
    system: GlobalSystem,
    trajectory: Trajectory,
    beliefs: Sequence[KalmanBelief] | None = None,
    clip: ClipConfig | None = None,
) -> FederatedData:
    """Run every client's proprietary filter on its own data.

    With ``clip`` the raw measurements and inputs are first clipped row-wise
    to R_y and R_u, as privacy accounting assumes bounded signals.
    """
    p = system.partition
    clients = []
    for m in range(p.client_count):
        # contiguous copies: strided views can take different BLAS paths than
        # the arrays restored from a snapshot, which breaks bitwise resumes
        y = np.ascontiguousarray(trajectory.client_measurements(m))
        u = np.ascontiguousarray(trajectory.client_inputs(m))
        if clip is not None:
            y = clip_rows(y, clip.r_y) if clip.r_y > 0 else np.zeros_like(y)
            u = clip_rows(u, clip.r_u) if clip.r_u > 0 else np.zeros_like(u)
        blocks = system.local(m)
        run = run_proprietary_filter(blocks, y, u, None if beliefs is None else beliefs[m])
        clients.append(ClientData(blocks, y, u, run))
    return FederatedData(p, clients)


@dataclass
class TrainingState:
    params: list[AugmentedParams]
    estimates: CrossBlockEstimates
    iteration: int = 0
    al: ALState | None = None
    # round-0 uploads of \hat h_c and u as received by the server
    server_cache: list[tuple[np.ndarray, np.ndarray]] | None = None

    def copy(self) -> "TrainingState":
        return TrainingState(
            [p.copy() for p in self.params],
            self.estimates.copy(),
            self.iteration,
            None if self.al is None else self.al.copy(),
            None if self.server_cache is None else [(a.copy(), b.copy()) for a, b in self.server_cache],
        )

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else {"shape": list(x.shape), "data": x.ravel().tolist()}

        return {
            "format": "fedlti.state/1",
            "iteration": self.iteration,
            "params": [{"theta": arr(p.theta), "phi": arr(p.phi)} for p in self.params],
            "A_hat": [[m, n, arr(v)] for (m, n), v in sorted(self.estimates.A_hat.items())],
            "B_hat": [[m, n, arr(v)] for (m, n), v in sorted(self.estimates.B_hat.items())],
            "al": None if self.al is None else {"rho": self.al.rho, "lambdas": [arr(x) for x in self.al.lambdas]},
            "server_cache": None if self.server_cache is None else [[arr(a), arr(b)] for a, b in self.server_cache],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingState":
        if data.get("format") != "fedlti.state/1":
            raise ValueError("not a training-state document")

        def arr(d):
            return None if d is None else np.array(d["data"], dtype=float).reshape(d["shape"])

        params = [AugmentedParams(arr(p["theta"]), arr(p["phi"])) for p in data["params"]]
        est = CrossBlockEstimates(
            {(m, n): arr(v) for m, n, v in data["A_hat"]},
            {(m, n): arr(v) for m, n, v in data["B_hat"]},
        )
        al = None
        if data["al"] is not None:
            al = ALState([arr(x) for x in data["al"]["lambdas"]], data["al"]["rho"])
        cache = None
        if data["server_cache"] is not None:
            cache = [(arr(a), arr(b)) for a, b in data["server_cache"]]
        return cls(params, est, data["iteration"], al, cache)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainingState":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def initial_state(partition: BlockPartition, seed: int, init: str = "random", scale: float = 0.1) -> TrainingState:
    """Starting parameters: small Gaussian draws (``init="random"``) or zeros."""
    M = partition.client_count
    if init == "zeros":
        params = [AugmentedParams.zeros(partition.state_dims[m], partition.measurement_dims[m]) for m in range(M)]
        return TrainingState(params, CrossBlockEstimates.zeros(partition))
    if init != "random":
        raise ConfigError(f"unknown init {init!r}")
    params = [
        AugmentedParams.random(partition.state_dims[m], partition.measurement_dims[m], substream(seed, "init", "client", m), scale)
        for m in range(M)
    ]
    est = CrossBlockEstimates.random(partition, substream(seed, "init", "server"), scale)
    return TrainingState(params, est)


# -- boundary -----------------------------------------------------------------


@dataclass
class DPChannel:
    """Clip bound C and noise multiplier sigma for one direction."""

    clip: float
    sigma: float


class Boundary:
    """In-process exchange between clients and server.

    Counts every transmitted value and, when ``msg``/``grad`` channels are
    given, replaces each payload row by clip(row) + N(0, sigma^2 C^2 I)
    with noise drawn from a stream keyed by (seed, channel, round, client).
    """

    def __init__(self, msg: DPChannel | None = None, grad: DPChannel | None = None, seed: int = 0, record: bool = False):
        if (msg is None) != (grad is None):
            raise ValueError("enable both DP channels or neither")
        self.msg = msg
        self.grad = grad
        self.seed = seed
        self.record = record
        self.upstream_values = 0
        self.downstream_values = 0
        self.transcript: list[ClientMessage | ServerMessage] = []

    @property
    def private(self) -> bool:
        return self.msg is not None

    def _privatize(self, parts: list[np.ndarray], channel: DPChannel, key: tuple) -> list[np.ndarray]:
        widths = [p.shape[1] for p in parts]
        rows = clip_rows(np.hstack(parts), channel.clip)
        noisy = gaussian_perturb(rows, channel.sigma, channel.clip, substream(self.seed, "dp", *key))
        return np.split(noisy, np.cumsum(widths)[:-1], axis=1)

    def upload(self, msg: ClientMessage) -> ClientMessage:
        self.upstream_values += msg.size
        if self.private:
            names = [n for n in ("h_hat_c", "h_hat_a", "h_a", "u") if getattr(msg, n) is not None]
            noisy = self._privatize([getattr(msg, n) for n in names], self.msg, ("msg", msg.round, msg.client))
            msg = replace(msg, **dict(zip(names, noisy)))
        if self.record:
            self.transcript.append(msg)
        return msg

    def download(self, msg: ServerMessage) -> ServerMessage:
        self.downstream_values += msg.size
        if self.private:
            g_h, g_hhat = self._privatize([msg.g_h, msg.g_hhat], self.grad, ("grad", msg.round, msg.client))
            msg = replace(msg, g_h=g_h, g_hhat=g_hhat)
        if self.record:
            self.transcript.append(msg)
        return msg


def expected_traffic(partition: BlockPartition, horizon: int, rounds: int) -> tuple[int, int]:
    """(upstream, downstream) value counts for ``rounds`` rounds starting at round 0."""
    if rounds == 0:
        return 0, 0
    P, U = partition.state_dims, partition.input_dims
    first = horizon * sum(3 * p + u for p, u in zip(P, U))
    later = horizon * sum(2 * p for p in P)
    return first + (rounds - 1) * later, rounds * horizon * sum(2 * p for p in P)


@dataclass
class PrivacySetup:
    boundary: Boundary
    bounds: SensitivityBounds
    ledger: BudgetLedger
    clip: ClipConfig


def private_boundary(
    system: GlobalSystem,
    trajectory: Trajectory,
    state: TrainingState,
    config: RoundConfig,
    record: bool = False,
) -> PrivacySetup:
    """Calibrate DP channels from the analytic sensitivities at the initial parameters."""
    dp = config.dp
    if dp is None:
        raise ConfigError("config has no privacy section")
    xi = config.xi
    setup = PipelineSetup(system, trajectory, state.params, state.estimates, xi)
    r_max = max(dp.r_y, dp.r_u)
    bounds = analytic_bounds(setup, r_max)
    d_msg = float(bounds.delta_msg.max())
    d_grad = float(bounds.delta_server.max())
    c_msg = dp.c_msg if dp.c_msg is not None else d_msg
    c_grad = dp.c_grad if dp.c_grad is not None else d_grad
    clip = ClipConfig(c_msg, c_grad, dp.r_y, dp.r_u)
    msg = DPChannel(c_msg, required_sigma(d_msg, c_msg, dp.epsilon_msg, dp.delta_msg))
    grad = DPChannel(c_grad, required_sigma(d_grad, c_grad, dp.epsilon_grad, dp.delta_grad))
    ledger = BudgetLedger(dp.epsilon_msg, dp.delta_msg, dp.epsilon_grad, dp.delta_grad)
    return PrivacySetup(Boundary(msg, grad, dp.seed, record), bounds, ledger, clip)


# -- rounds ---------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    """Metrics of the state entering a round (or of the final state)."""

    iteration: int
    L_s: float
    residual_term: float
    L_ma: np.ndarray
    baseline: np.ndarray
    D: np.ndarray  # time-averaged ||D^t_m||^2 per client
    delta_d: np.ndarray

    @property
    def disentanglement(self) -> float:
        return float(self.D.sum())


def _second_moment(x: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(x.T @ x / x.shape[0])[-1])


def client_curvature(c: ClientData) -> float:
    """Scale of the theta-Hessian, computed from client-local data only."""
    return max(1.0, np.linalg.norm(c.blocks.A, 2) ** 2 * _second_moment(c.measurements))


def _forward(state: TrainingState, data: FederatedData):
    return [
        augmented_forward(state.params[m], c.blocks.A, c.blocks.B, c.blocks.C, c.filter.refined, c.inputs, c.measurements)
        for m, c in enumerate(data.clients)
    ]


def _raw_uploads(data: FederatedData, traces) -> list[ClientUpload]:
    return [ClientUpload(c.filter.refined[:-1], c.inputs, tr.h_a, tr.h_hat_a[:-1]) for c, tr in zip(data.clients, traces)]


def evaluate(state: TrainingState, data: FederatedData, xi, traces=None) -> IterationRecord:
    """Metrics of ``state`` on the raw (non-privatized) data."""
    traces = _forward(state, data) if traces is None else traces
    uploads = _raw_uploads(data, traces)
    loss = server_loss(uploads, data.diag, state.estimates, xi)
    inputs = [c.inputs for c in data.clients]
    return IterationRecord(
        state.iteration,
        loss.total,
        loss.residual_term,
        np.array([tr.loss for tr in traces]),
        np.array([c.baseline_loss for c in data.clients]),
        loss.disentangle_term,
        np.array([delta_d(state.params[m].phi, state.estimates, inputs, m) for m in range(len(traces))]),
    )


def run_round(
    state: TrainingState,
    data: FederatedData,
    config: RoundConfig,
    boundary: Boundary | None = None,
) -> tuple[TrainingState, IterationRecord, float]:
    """Execute one synchronous round.

    Returns the new state, the metrics of the incoming state, and L_s as
    computed by the server from what crossed the boundary (equal to the
    recorded L_s unless privacy is on).
    """
    boundary = Boundary() if boundary is None else boundary
    M = data.partition.client_count
    k = state.iteration
    order = list(range(M)) if config.client_order is None else list(config.client_order)
    if sorted(order) != list(range(M)):
        raise ConfigError(f"client_order must be a permutation of 0..{M - 1}")

    # phase 1: clients
    with np.errstate(over="ignore", invalid="ignore"):
        traces = _forward(state, data)
        record = evaluate(state, data, config.xi, traces)
    received: list[ClientMessage | None] = [None] * M
    for m in order:
        c = data.clients[m]
        tr = traces[m]
        static = (c.filter.refined[:-1], c.inputs) if state.server_cache is None else (None, None)
        msg = ClientMessage(m, k, tr.h_a, tr.h_hat_a[:-1], *static)
        received[m] = boundary.upload(msg)

    # phase 2: server (barrier)
    cache = state.server_cache
    if cache is None:
        cache = [(msg.h_hat_c, msg.u) for msg in received]
    uploads = [ClientUpload(cache[m][0], cache[m][1], received[m].h_a, received[m].h_hat_a) for m in range(M)]
    diag = data.diag
    with np.errstate(over="ignore", invalid="ignore"):
        server_view = server_loss(uploads, diag, state.estimates, config.xi).total
    if not (np.isfinite(server_view) and np.isfinite(record.L_s)):
        raise DivergenceError("server loss", k)
    al = state.al
    if config.uses_al(k):
        if al is None:
            al = ALState.zeros(data.partition, data.horizon, config.rho)
        _, grads = al_loss_and_grads(uploads, diag, state.estimates, al)
    else:
        grads = server_gradients(uploads, diag, state.estimates, config.xi)
    grads_A = grads.A_hat
    if config.precondition:
        scale = [max(1.0, _second_moment(hc)) for hc, _ in cache]
        grads_A = {(m, n): g / scale[n] for (m, n), g in grads_A.items()}
    estimates = update_blocks(state.estimates, grads_A, grads.B_hat, config.alpha_A, config.alpha_B, k)
    if config.uses_al(k):
        al = al_dual_update(al, disentanglement_gaps(uploads, diag, estimates))
    replies = [boundary.download(ServerMessage(m, k, grads.g_h[m], grads.g_hhat[m])) for m in range(M)]

    # phase 3: clients
    params = list(state.params)
    for m in order:
        c = data.clients[m]
        local = client_local_gradients(traces[m], c.blocks.A, c.blocks.C)
        g_hhat = replies[m].g_hhat if config.theta_grad == "proposition" else None
        remote = chain_rule_server_gradients(replies[m].g_h, g_hhat, c.blocks.A, traces[m].y_prev)
        rates = config.rates
        if config.precondition:
            kappa = client_curvature(c)
            rates = LearningRates(rates.eta1 / kappa, rates.eta2 / kappa, rates.gamma1, rates.gamma2)
        params[m] = update_params(state.params[m], local, remote, rates, m, k)

    return TrainingState(params, estimates, k + 1, al, cache), record, server_view


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainingHistory:
    records: list[IterationRecord] = field(default_factory=list)
    final: IterationRecord | None = None
    snapshots: dict[int, TrainingState] = field(default_factory=dict)
    state: TrainingState | None = None
    upstream_values: int = 0
    downstream_values: int = 0
    budget: BudgetLedger | None = None

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> np.ndarray:
        rows = self.records + ([self.final] if self.final is not None else [])
        return np.array([getattr(r, name) for r in rows])

    def to_csv(self, path: str | Path) -> None:
        """One row per executed round plus a last row for the final state."""
        rows = self.records + ([self.final] if self.final is not None else [])
        M = len(rows[0].L_ma) if rows else 0
        header = ["iteration", "L_s", "residual_term"]
        for m in range(M):
            header += [f"L_ma_{m}", f"baseline_{m}", f"D_{m}", f"delta_d_{m}"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in rows:
                line = [r.iteration, repr(r.L_s), repr(r.residual_term)]
                for m in range(M):
                    line += [repr(float(r.L_ma[m])), repr(float(r.baseline[m])), repr(float(r.D[m])), repr(float(r.delta_d[m]))]
                writer.writerow(line)


def run_training(
    data: FederatedData,
    config: RoundConfig,
    state: TrainingState | None = None,
    boundary: Boundary | None = None,
    budget: BudgetLedger | None = None,
) -> TrainingHistory:
    """Iterate rounds until k >= max_iterations or the server's L_s <= tol.

    ``state`` may be a snapshot from an earlier run; rounds then continue
    from its iteration counter, and ``max_iterations`` counts total rounds.
    """
    state = initial_state(data.partition, config.seed) if state is None else state.copy()
    boundary = Boundary() if boundary is None else boundary
    history = TrainingHistory(budget=budget)
    if config.snapshot_stride and state.iteration % config.snapshot_stride == 0:
        history.snapshots[state.iteration] = state.copy()
    while True:
        state, record, server_view = run_round(state, data, config, boundary)
        history.records.append(record)
        if budget is not None:
            budget.record_round()
        if config.snapshot_stride and state.iteration % config.snapshot_stride == 0:
            history.snapshots[state.iteration] = state.copy()
        if state.iteration >= config.max_iterations or server_view <= config.tol:
            break
    history.final = evaluate(state, data, config.xi)
    history.state = state
    history.upstream_values = boundary.upstream_values
    history.downstream_values = boundary.downstream_values
    return history


def check_convergence(history: TrainingHistory | Sequence[float], window: int, epsilon_rel: float) -> bool:
    """True when L_s changed by less than ``epsilon_rel`` (relative) across the last ``window`` values."""
    if window < 2:
        raise ValueError("window must be >= 2")
    values = history.series("L_s") if isinstance(history, TrainingHistory) else np.asarray(history, dtype=float)
    if len(values) < window:
        return False
    first, last = values[-window], values[-1]
    scale = max(abs(first), np.finfo(float).tiny)
    return bool(abs(last - first) / scale < epsilon_rel)
