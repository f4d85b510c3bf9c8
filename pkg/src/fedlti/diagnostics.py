"""Diagnostics of a trained federation.

All expectations are plain time averages over t = 1..T, with y^0 := 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import AugmentedParams, augmented_forward, client_local_gradients, previous_measurements
from .estimation import FilterRun, run_oracle_filter, run_proprietary_filter
from .server import ClientUpload, CrossBlockEstimates, DiagonalBlocks, server_loss
from .systems import GlobalSystem, Trajectory


def disentanglement_norm(
    uploads: Sequence[ClientUpload],
    diag: Sequence[DiagonalBlocks],
    estimates: CrossBlockEstimates,
) -> np.ndarray:
    """Per-client time average of ||D^t_m||^2."""
    return server_loss(uploads, diag, estimates, 0.0).disentangle_term


def delta_d(phi: np.ndarray, estimates: CrossBlockEstimates, inputs: Sequence[np.ndarray], m: int) -> float:
    """||phi_m - (1/T) sum_t sum_{n != m} Bhat_mn u^{t-1}_n||."""
    target = np.zeros_like(np.asarray(phi, dtype=float))
    for n in range(len(inputs)):
        if n != m:
            target = target + estimates.B_hat[m, n] @ np.asarray(inputs[n], dtype=float).mean(axis=0)
    return float(np.linalg.norm(phi - target))


@dataclass
class ClientView:
    """One client's trajectory pieces needed by the diagnostics."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    measurements: np.ndarray
    inputs: np.ndarray
    filter: FilterRun


def client_views(system: GlobalSystem, trajectory: Trajectory) -> list[ClientView]:
    views = []
    for m in range(system.client_count):
        blocks = system.local(m)
        y, u = trajectory.client_measurements(m), trajectory.client_inputs(m)
        views.append(ClientView(blocks.A, blocks.B, blocks.C, y, u, run_proprietary_filter(blocks, y, u)))
    return views


def stationarity_residuals(
    params: Sequence[AugmentedParams],
    estimates: CrossBlockEstimates,
    views: Sequence[ClientView],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-client (theta_residual, phi_residual).

    theta_residual = ||E[A_mm theta y^{t-1}] - E[sum_n Ahat_mn \\hat h^{t-1}_{n,c}]||
    phi_residual   = ||phi - E[sum_n Bhat_mn u^{t-1}_n]||  (= delta_d)
    """
    M = len(views)
    theta_res, phi_res = np.empty(M), np.empty(M)
    inputs = [v.inputs for v in views]
    for m, v in enumerate(views):
        lhs = v.A @ params[m].theta @ previous_measurements(v.measurements).mean(axis=0)
        rhs = np.zeros_like(lhs)
        for n in range(M):
            if n != m:
                rhs = rhs + estimates.A_hat[m, n] @ views[n].filter.refined[:-1].mean(axis=0)
        theta_res[m] = np.linalg.norm(lhs - rhs)
        phi_res[m] = delta_d(params[m].phi, estimates, inputs, m)
    return theta_res, phi_res


def normal_equation_residuals(params: AugmentedParams, view: ClientView) -> tuple[np.ndarray, np.ndarray]:
    """E[(C A)^T r (y^{t-1})^T] and E[C^T r] for one client; both are -1/2 times the local gradients."""
    trace = augmented_forward(params, view.A, view.B, view.C, view.filter.refined, view.inputs, view.measurements)
    g_theta, g_phi = client_local_gradients(trace, view.A, view.C)
    return -0.5 * g_theta, -0.5 * g_phi


def batch_means_se(series: np.ndarray, batches: int = 20) -> np.ndarray:
    """Standard error of the mean of a (possibly autocorrelated) series, per column."""
    series = np.asarray(series, dtype=float)
    T = series.shape[0]
    size = T // batches
    if size < 1:
        raise ValueError(f"series of length {T} is too short for {batches} batches")
    means = series[: size * batches].reshape(batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


@dataclass
class OracleGap:
    observed: np.ndarray  # E[y_o - y_a]
    predicted: np.ndarray  # J E[z]
    standard_error: np.ndarray  # of observed - predicted
    J: np.ndarray
    M_fed: np.ndarray
    M_o: np.ndarray
    e: np.ndarray  # rows e_t, t = 1..T
    condition: float
    pseudo_inverse: bool

    @property
    def z_scores(self) -> np.ndarray:
        diff = self.observed - self.predicted
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.standard_error > 0, np.abs(diff) / self.standard_error, np.where(diff == 0, 0.0, np.inf))

    def agrees(self, k: float = 3.0) -> bool:
        return bool(np.all(self.z_scores <= k))


def oracle_gap(
    params: Sequence[AugmentedParams],
    estimates: CrossBlockEstimates,
    system: GlobalSystem,
    trajectory: Trajectory,
    m: int,
    views: Sequence[ClientView] | None = None,
    oracle: FilterRun | None = None,
    batches: int = 20,
) -> OracleGap:
    """Compare E[y_o - y_a] with J_m E[z^{t-1}] for client m.

    y_o is the centralized filter's one-step measurement prediction,
    y_a = C_mm h_{m,a}, z^{t-1} = [y^{t-1}_m; u^{t-1}; \\hat h^{t-1}_{m,c}] and
    J_m = E[e z^T] Sigma_z^{-1}. Sigma_z is inverted with a pseudo-inverse
    (relative cutoff 1e-10) when its condition number exceeds 1e10.
    """
    views = client_views(system, trajectory) if views is None else views
    oracle = run_oracle_filter(system, trajectory.measurements, trajectory.inputs) if oracle is None else oracle
    p = system.partition
    M = p.client_count
    v = views[m]
    T = trajectory.horizon
    trace = augmented_forward(params[m], v.A, v.B, v.C, v.filter.refined, v.inputs, v.measurements)
    y_prev = previous_measurements(v.measurements)
    h_c_prev = v.filter.refined[:-1]
    z = np.hstack([y_prev, trajectory.inputs, h_c_prev])

    cross = np.zeros((T, p.state_dims[m]))
    for n in range(M):
        if n != m:
            cross += views[n].filter.refined[:-1] @ estimates.A_hat[m, n].T + views[n].inputs @ estimates.B_hat[m, n].T
    e = (y_prev @ params[m].theta.T @ v.A.T - cross + params[m].phi) @ v.C.T

    sigma_z = z.T @ z / T
    cond = float(np.linalg.cond(sigma_z))
    use_pinv = not np.isfinite(cond) or cond > 1e10
    sigma_inv = np.linalg.pinv(sigma_z, rcond=1e-10) if use_pinv else np.linalg.inv(sigma_z)
    J = (e.T @ z / T) @ sigma_inv

    y_o = oracle.reconstructions[:, p.slice("measurement", m)]
    gap = y_o - trace.y_tilde
    diff_series = gap - z @ J.T

    B_row = [estimates.B_hat[m, n] if n != m else v.B for n in range(M)]
    M_fed = np.hstack([v.C @ v.A @ params[m].theta, v.C @ np.hstack(B_row), v.C @ v.A])
    M_o = (v.measurements.T @ z / T) @ sigma_inv
    return OracleGap(
        gap.mean(axis=0),
        J @ z.mean(axis=0),
        batch_means_se(diff_series, batches),
        J,
        M_fed,
        M_o,
        e,
        cond,
        use_pinv,
    )


@dataclass
class ExcitationCheck:
    passed: bool
    alpha: float


def persistent_excitation_check(inputs: np.ndarray, order: int) -> ExcitationCheck:
    """Smallest eigenvalue of (1/L) sum_{k=t}^{t+L-1} u^k u^k^T over all windows."""
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    if order < 1 or T < order:
        raise ValueError(f"need 1 <= order <= horizon, got order {order} for horizon {T}")
    outer = np.einsum("ti,tj->tij", u, u)
    csum = np.concatenate([np.zeros((1,) + outer.shape[1:]), np.cumsum(outer, axis=0)])
    windows = (csum[order:] - csum[:-order]) / order
    alpha = float(np.linalg.eigvalsh(windows)[:, 0].min())
    # round-off can leave a tiny negative value for rank-deficient windows
    alpha = max(alpha, 0.0) if alpha > -1e-12 else alpha
    return ExcitationCheck(alpha > 1e-12, alpha)


def rank_condition(A_mm: np.ndarray, C_mm: np.ndarray) -> bool:
    """Is C_mm A_mm of full column rank?"""
    CA = C_mm @ A_mm
    return bool(np.linalg.matrix_rank(CA) == CA.shape[1])


@dataclass
class DiagnosticsReport:
    iteration: int
    D: np.ndarray
    delta_d: np.ndarray
    theta_residual: np.ndarray
    phi_residual: np.ndarray
    normal_eq: list[tuple[np.ndarray, np.ndarray]]
    oracle_gap_observed: list[np.ndarray]
    oracle_gap_predicted: list[np.ndarray]
    oracle_gap_se: list[np.ndarray]
    pe_passed: bool
    pe_alpha: float
    rank_ok: list[bool]
    pinv_used: list[bool] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for m in range(len(self.D)):
            out.append(
                {
                    "iteration": self.iteration,
                    "client": m,
                    "D": float(self.D[m]),
                    "delta_d": float(self.delta_d[m]),
                    "theta_residual": float(self.theta_residual[m]),
                    "phi_residual": float(self.phi_residual[m]),
                    "normal_eq_theta": float(np.linalg.norm(self.normal_eq[m][0])),
                    "normal_eq_phi": float(np.linalg.norm(self.normal_eq[m][1])),
                    "gap_observed": float(np.linalg.norm(self.oracle_gap_observed[m])),
                    "gap_predicted": float(np.linalg.norm(self.oracle_gap_predicted[m])),
                    "gap_max_z": float(
                        np.max(
                            np.abs(self.oracle_gap_observed[m] - self.oracle_gap_predicted[m])
                            / np.maximum(self.oracle_gap_se[m], np.finfo(float).tiny)
                        )
                    ),
                    "pe_passed": int(self.pe_passed),
                    "pe_alpha": self.pe_alpha,
                    "rank_ok": int(self.rank_ok[m]),
                    "pinv_used": int(self.pinv_used[m]) if self.pinv_used else 0,
                }
            )
        return out


def diagnose(
    params: Sequence[AugmentedParams],
    estimates: CrossBlockEstimates,
    system: GlobalSystem,
    trajectory: Trajectory,
    iteration: int = 0,
    pe_order: int = 50,
) -> DiagnosticsReport:
    views = client_views(system, trajectory)
    oracle = run_oracle_filter(system, trajectory.measurements, trajectory.inputs)
    M = system.client_count
    traces = [augmented_forward(params[m], v.A, v.B, v.C, v.filter.refined, v.inputs, v.measurements) for m, v in enumerate(views)]
    uploads = [ClientUpload(v.filter.refined[:-1], v.inputs, tr.h_a, tr.h_hat_a[:-1]) for v, tr in zip(views, traces)]
    diag = [DiagonalBlocks(v.A, v.B) for v in views]
    theta_res, phi_res = stationarity_residuals(params, estimates, views)
    gaps = [oracle_gap(params, estimates, system, trajectory, m, views, oracle) for m in range(M)]
    pe = persistent_excitation_check(trajectory.inputs, min(pe_order, trajectory.horizon))
    return DiagnosticsReport(
        iteration,
        disentanglement_norm(uploads, diag, estimates),
        phi_res.copy(),
        theta_res,
        phi_res,
        [normal_equation_residuals(params[m], views[m]) for m in range(M)],
        [g.observed for g in gaps],
        [g.predicted for g in gaps],
        [g.standard_error for g in gaps],
        pe.passed,
        pe.alpha,
        [rank_condition(v.A, v.C) for v in views],
        [g.pseudo_inverse for g in gaps],
    )


def write_diagnostics_csv(path: str | Path, reports: Sequence[DiagnosticsReport]) -> None:
    rows = [row for r in reports for row in r.rows()]
    if not rows:
        raise ValueError("no diagnostics to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
