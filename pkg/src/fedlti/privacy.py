"""Differential-privacy layer for the federation transcript.

Client messages z^t_m and server gradients g^t_m are clipped in l2 norm and
perturbed with isotropic Gaussian noise of standard deviation sigma * C.
Budgets compose additively over channels and rounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import AugmentedParams, augmented_forward
from .estimation import FilterRun, run_proprietary_filter
from .rng import substream
from .server import ClientUpload, CrossBlockEstimates, DiagonalBlocks, server_gradients
from .systems import GlobalSystem, Trajectory


@dataclass(frozen=True)
class ClipConfig:
    c_msg: float
    c_grad: float
    r_y: float
    r_u: float

    def __post_init__(self) -> None:
        if self.c_msg <= 0 or self.c_grad <= 0:
            raise ValueError("clipping bounds must be positive")
        if self.r_y < 0 or self.r_u < 0:
            raise ValueError("signal bounds must be non-negative")

    @property
    def r_max(self) -> float:
        return max(self.r_y, self.r_u)


def clip(x: np.ndarray, bound: float) -> np.ndarray:
    """Scale ``x`` onto the l2 ball of radius ``bound`` if it lies outside."""
    if bound <= 0:
        raise ValueError("clipping bound must be positive")
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    return x * (bound / norm) if norm > bound else x.copy()


def clip_rows(x: np.ndarray, bound: float) -> np.ndarray:
    """Row-wise :func:`clip` for a (T, k) array."""
    if bound <= 0:
        raise ValueError("clipping bound must be positive")
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    return x * scale


def message_sensitivity(kappa: float, r_max: float) -> float:
    return kappa * r_max


def gradient_sensitivity(
    T: int,
    norm_A_mm: float,
    L_mprime: float,
    norm_C_mm: float,
    offdiag_A_norms: Sequence[float] = (),
    offdiag_B_norms: Sequence[float] = (),
    betas: Sequence[float] = (),
    lag: int | float = 0,
    r_max: float = 1.0,
) -> float:
    """Sensitivity bound of the server gradient g^t_m.

    Delta = (2/T)(1 + ||A_mm||) kappa_mix R_max with
    kappa_mix = L' (||C_mm|| + sum_n ||A_mn|| beta_n^lag + ||B_mn||).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not len(offdiag_A_norms) == len(offdiag_B_norms) == len(betas):
        raise ValueError("one (||A_mn||, ||B_mn||, beta_n) triple per other client")
    mix = norm_C_mm
    for a, b, beta in zip(offdiag_A_norms, offdiag_B_norms, betas):
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        decay = 0.0 if math.isinf(lag) else beta**lag
        mix += a * decay + b
    return (2.0 / T) * (1.0 + norm_A_mm) * L_mprime * mix * r_max


def required_sigma(delta_sens: float, clip_bound: float, epsilon: float, delta: float) -> float:
    """Smallest noise multiplier giving (epsilon, delta)-DP for one release."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if clip_bound <= 0:
        raise ValueError("clip bound must be positive")
    return (delta_sens / clip_bound) * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def gaussian_perturb(x: np.ndarray, sigma: float, clip_bound: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma^2 C^2 I) to an already-clipped vector (or rows of vectors)."""
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms > clip_bound + 1e-9):
        raise ValueError("input must be clipped to clip_bound before perturbation")
    if sigma == 0:
        return x.copy()
    return x + sigma * clip_bound * rng.standard_normal(x.shape)


@dataclass
class BudgetLedger:
    eps_msg: float
    delta_msg: float
    eps_grad: float
    delta_grad: float
    rounds: int = 0

    @property
    def epsilon_total(self) -> float:
        return self.rounds * (self.eps_msg + self.eps_grad)

    @property
    def delta_total(self) -> float:
        return self.rounds * (self.delta_msg + self.delta_grad)

    def record_round(self) -> None:
        self.rounds += 1

    def __add__(self, other: "BudgetLedger") -> "BudgetLedger":
        if (self.eps_msg, self.delta_msg, self.eps_grad, self.delta_grad) != (
            other.eps_msg,
            other.delta_msg,
            other.eps_grad,
            other.delta_grad,
        ):
            raise ValueError("only ledgers with identical per-round budgets can be concatenated")
        return BudgetLedger(self.eps_msg, self.delta_msg, self.eps_grad, self.delta_grad, self.rounds + other.rounds)


def compose(rounds: int, eps_msg: float, delta_msg: float, eps_grad: float, delta_grad: float) -> tuple[float, float]:
    """Total (epsilon, delta) after ``rounds`` rounds of both channels."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    ledger = BudgetLedger(eps_msg, delta_msg, eps_grad, delta_grad, rounds)
    return ledger.epsilon_total, ledger.delta_total


# -- contractivity and analytic sensitivities ----------------------------------


@dataclass
class Contractivity:
    """Impulse-response constants of one client's estimator pipeline.

    Any one-off change dy at time s moves \\hat h_{m,c}, \\hat h_{m,a} and
    h_{m,a} at time t >= s by at most L beta^(t-s) ||dy||.
    """

    L: float
    beta: float

    @property
    def kappa(self) -> float:
        # message = [\hat h_c; \hat h_a; h_a; u], three components each bounded by L
        return 3.0 * self.L


def estimate_contractivity(A: np.ndarray, C: np.ndarray, run: FilterRun, theta: np.ndarray) -> Contractivity:
    """Probe the (time-varying) linear map from one measurement to the client states.

    beta is the spectral radius of the steady-state error dynamics
    (I - K C) A; L is the largest ratio ||G_k|| / beta^k over the impulse
    responses G_k observed within the run's horizon.
    """
    gains = run.gains
    T, P = gains.shape[0], A.shape[0]
    K_inf = gains[-1]
    beta = float(np.max(np.abs(np.linalg.eigvals((np.eye(P) - K_inf @ C) @ A))))
    beta = min(max(beta, 1e-6), 1.0 - 1e-9)
    transitions = np.einsum("tij,jk->tik", np.eye(P)[None] - gains @ C, A)

    # once gains stop changing the response no longer depends on the start time
    settled = T
    for t in range(1, T):
        if np.allclose(gains[t:], gains[t - 1], rtol=0.0, atol=1e-15):
            settled = t
            break

    L = 0.0
    for s in range(min(settled + 1, T)):
        G = gains[s].copy()  # d\hat h_c^{s} / dy^{s}
        for k in range(0, T - s):
            if k > 0:
                G = transitions[s + k] @ G
            ga = G + theta if k == 0 else G
            ratio = max(np.linalg.norm(G, 2), np.linalg.norm(ga, 2)) / beta**k
            # h_a^{s+k+1} = A \hat h_a^{s+k}
            ratio = max(ratio, np.linalg.norm(A @ ga, 2) / beta ** (k + 1))
            L = max(L, ratio)
    return Contractivity(L=float(L), beta=beta)


@dataclass
class SensitivityBounds:
    """Per-client analytic sensitivities, all at lag 0 (the worst case)."""

    delta_msg: np.ndarray
    delta_grad: np.ndarray  # g_h channel
    delta_grad_hat: np.ndarray  # g_hhat channel
    kappa: np.ndarray
    kappa_mix: np.ndarray
    contractivity: list[Contractivity]

    @property
    def delta_server(self) -> np.ndarray:
        """Sensitivity of the whole server message (g_h, g_hhat) per time."""
        return self.delta_grad + self.delta_grad_hat


def _offdiag_norms(estimates: CrossBlockEstimates, m: int, M: int):
    a = [np.linalg.norm(estimates.A_hat[m, n], 2) for n in range(M) if n != m]
    b = [np.linalg.norm(estimates.B_hat[m, n], 2) for n in range(M) if n != m]
    return a, b


def gradient_bound(
    system: GlobalSystem,
    estimates: CrossBlockEstimates,
    contractivity: Sequence[Contractivity],
    T: int,
    m: int,
    perturbed_client: int,
    lag: int | float,
    r_max: float,
) -> float:
    """Delta_grad for g_m when client ``perturbed_client`` changed one measurement."""
    M = system.client_count
    a, b = _offdiag_norms(estimates, m, M)
    betas = [contractivity[n].beta for n in range(M) if n != m]
    return gradient_sensitivity(
        T,
        np.linalg.norm(system.block("A", m, m), 2),
        contractivity[perturbed_client].L,
        np.linalg.norm(system.block("C", m, m), 2),
        a,
        b,
        betas,
        lag,
        r_max,
    )


def state_gradient_bound(
    setup: "PipelineSetup",
    contractivity: Sequence[Contractivity],
    T: int,
    m: int,
    perturbed_client: int,
    lag: int | float,
    r_max: float,
) -> float:
    """Bound on the change of g_hhat^t_m = (2 xi / T) A_mm^T D^t_m.

    D^t_m moves through theta_m y (own client, lag 0 only) and through
    Ahat_mn \\hat h_{n,c} (other clients, decaying with beta_n^lag).
    """
    system = setup.system
    xi = float(np.max(np.broadcast_to(setup.xi, (system.client_count,))))
    norm_A = np.linalg.norm(system.block("A", m, m), 2)
    if perturbed_client == m:
        own = norm_A * np.linalg.norm(setup.params[m].theta, 2) if lag == 0 else 0.0
        return (2.0 * xi / T) * norm_A * own * r_max
    c = contractivity[perturbed_client]
    decay = 0.0 if math.isinf(lag) else c.beta**lag
    cross = np.linalg.norm(setup.estimates.A_hat[m, perturbed_client], 2) * c.L * decay
    return (2.0 * xi / T) * norm_A * cross * r_max


@dataclass
class PipelineSetup:
    """Fixed parameters and data the audit runs the real pipeline on."""

    system: GlobalSystem
    trajectory: Trajectory
    params: list[AugmentedParams]
    estimates: CrossBlockEstimates
    xi: float = 10.0


def default_audit_setup(system: GlobalSystem, horizon: int = 200, seed: int = 0) -> PipelineSetup:
    from .systems import simulate  # local import keeps module import order flat

    traj = simulate(system, horizon, seed)
    p = system.partition
    params = [AugmentedParams.random(p.state_dims[m], p.measurement_dims[m], substream(seed, "audit", "theta", m)) for m in range(p.client_count)]
    est = CrossBlockEstimates.random(p, substream(seed, "audit", "blocks"))
    return PipelineSetup(system, traj, params, est)


def _pipeline(setup: PipelineSetup, measurements: np.ndarray):
    """Run filters, augmented clients and server gradients on ``measurements``."""
    system, traj = setup.system, setup.trajectory
    p = system.partition
    runs, traces, uploads = [], [], []
    for m in range(p.client_count):
        blocks = system.local(m)
        y = measurements[:, p.slice("measurement", m)]
        u = traj.client_inputs(m)
        run = run_proprietary_filter(blocks, y, u)
        trace = augmented_forward(setup.params[m], blocks.A, blocks.B, blocks.C, run.refined, u, y)
        runs.append(run)
        traces.append(trace)
        uploads.append(ClientUpload(run.refined[:-1], u, trace.h_a, trace.h_hat_a[:-1]))
    diag = [DiagonalBlocks(system.block("A", m, m), system.block("B", m, m)) for m in range(p.client_count)]
    grads = server_gradients(uploads, diag, setup.estimates, setup.xi)
    return runs, traces, uploads, grads


def message_rows(upload: ClientUpload) -> np.ndarray:
    """Per-time message z = [\\hat h_c; \\hat h_a; h_a; u], one row per t."""
    return np.hstack([upload.h_hat_c, upload.h_hat_a, upload.h_a, upload.u])


def analytic_bounds(setup: PipelineSetup, r_max: float) -> SensitivityBounds:
    system = setup.system
    runs, _, _, _ = _pipeline(setup, setup.trajectory.measurements)
    M = system.client_count
    T = setup.trajectory.horizon
    contr = [
        estimate_contractivity(system.block("A", m, m), system.block("C", m, m), runs[m], setup.params[m].theta)
        for m in range(M)
    ]
    kappa = np.array([c.kappa for c in contr])
    d_grad = np.empty(M)
    d_hat = np.empty(M)
    k_mix = np.empty(M)
    for m in range(M):
        d_grad[m] = max(gradient_bound(system, setup.estimates, contr, T, m, mp, 0, r_max) for mp in range(M))
        d_hat[m] = max(state_gradient_bound(setup, contr, T, m, mp, 0, r_max) for mp in range(M))
        scale = (2.0 / T) * (1.0 + np.linalg.norm(system.block("A", m, m), 2)) * r_max
        k_mix[m] = d_grad[m] / scale if scale > 0 else 0.0
    return SensitivityBounds(kappa * r_max, d_grad, d_hat, kappa, k_mix, contr)


@dataclass
class AuditResult:
    stage: str
    trials: int
    max_deviation: float
    analytic_bound: float
    max_ratio: float  # largest deviation / applicable bound over all trials, clients and times

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1.0


# absorbs round-off where the analytic bound is exactly zero
_ROUNDOFF = 1e-12


def _ratio(dev: np.ndarray, bound: np.ndarray, scale: float) -> float:
    slack = _ROUNDOFF * max(scale, 1.0)
    excess = np.where(dev > slack, dev / np.maximum(bound, slack), 0.0)
    return float(excess.max(initial=0.0))


def run_audit(
    setup: PipelineSetup,
    trials: int = 100,
    perturbation_bound: float = 1.0,
    seed: int = 0,
    bounds: SensitivityBounds | None = None,
) -> dict[str, AuditResult]:
    """Audit both release stages on the same neighbouring datasets.

    Each trial replaces one measurement y^{t*}_{m*} by y + dy with
    ||dy|| = ``perturbation_bound`` in a random direction, reruns the whole
    pipeline and compares the per-time l2 change of every client message
    row and every server gradient row against the analytic bound for that
    client, perturbed client and lag.
    """
    system, traj = setup.system, setup.trajectory
    p = system.partition
    M, T = p.client_count, traj.horizon
    bounds = analytic_bounds(setup, perturbation_bound) if bounds is None else bounds
    _, _, base_uploads, base_grads = _pipeline(setup, traj.measurements)
    rng = substream(seed, "audit")

    dev_msg = dev_grad = ratio_msg = ratio_grad = 0.0
    for _ in range(trials):
        m_star = int(rng.integers(M))
        t_star = int(rng.integers(1, T + 1))  # y^{t*} is row t*-1
        direction = rng.standard_normal(p.measurement_dims[m_star])
        dy = perturbation_bound * direction / np.linalg.norm(direction)
        y = traj.measurements.copy()
        y[t_star - 1, p.slice("measurement", m_star)] += dy
        _, _, uploads, grads = _pipeline(setup, y)
        # row t-1 of a server gradient reads client states at t-1
        lags = np.maximum(np.arange(T) - t_star, 0)
        for m in range(M):
            dev = np.linalg.norm(message_rows(uploads[m]) - message_rows(base_uploads[m]), axis=1)
            dev_msg = max(dev_msg, float(dev.max()))
            ratio_msg = max(ratio_msg, _ratio(dev, np.full(T, bounds.delta_msg[m]), perturbation_bound))

            d_h = np.linalg.norm(grads.g_h[m] - base_grads.g_h[m], axis=1)
            d_hat = np.linalg.norm(grads.g_hhat[m] - base_grads.g_hhat[m], axis=1)
            b_h = np.array(
                [gradient_bound(system, setup.estimates, bounds.contractivity, T, m, m_star, k, perturbation_bound) for k in lags]
            )
            b_hat = np.array(
                [state_gradient_bound(setup, bounds.contractivity, T, m, m_star, k, perturbation_bound) for k in lags]
            )
            dev_grad = max(dev_grad, float(np.hypot(d_h, d_hat).max()))
            ratio_grad = max(ratio_grad, _ratio(d_h, b_h, perturbation_bound), _ratio(d_hat, b_hat, perturbation_bound))
    return {
        "message": AuditResult("message", trials, dev_msg, float(bounds.delta_msg.max()), ratio_msg),
        "gradient": AuditResult("gradient", trials, dev_grad, float(bounds.delta_server.max()), ratio_grad),
    }


def empirical_sensitivity_audit(
    setup: PipelineSetup,
    stage: str,
    trials: int = 100,
    perturbation_bound: float = 1.0,
    seed: int = 0,
    bounds: SensitivityBounds | None = None,
) -> AuditResult:
    """Largest pre-noise deviation of one stage on neighbouring datasets; see :func:`run_audit`."""
    if stage not in ("message", "gradient"):
        raise ValueError(f"unknown stage {stage!r}")
    return run_audit(setup, trials, perturbation_bound, seed, bounds)[stage]


@dataclass
class ChannelReport:
    channel: str
    delta_analytic: float
    delta_empirical: float | None
    clip: float
    sigma: float
    epsilon: float
    delta: float
    rounds: int
    epsilon_total: float
    delta_total: float


def write_privacy_report(path: str | Path, rows: Sequence[ChannelReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "delta_analytic", "delta_empirical_max", "clip", "sigma", "epsilon", "delta", "rounds", "epsilon_total", "delta_total"])
        for r in rows:
            writer.writerow(
                [
                    r.channel,
                    repr(r.delta_analytic),
                    "" if r.delta_empirical is None else repr(r.delta_empirical),
                    repr(r.clip),
                    repr(r.sigma),
                    repr(r.epsilon),
                    repr(r.delta),
                    r.rounds,
                    repr(r.epsilon_total),
                    repr(r.delta_total),
                ]
            )


@dataclass
class PrivacyConfig:
    """Settings for DP training. Unset clip bounds default to the analytic sensitivities."""

    epsilon_msg: float = 1.0
    delta_msg: float = 1e-5
    epsilon_grad: float = 1.0
    delta_grad: float = 1e-5
    r_y: float = 10.0
    r_u: float = 10.0
    c_msg: float | None = None
    c_grad: float | None = None
    seed: int = 0
