"""Server side: prediction, penalized loss, gradients and block updates.

All sequences are aligned on t = 1..T. For client m the server holds

* ``h_hat_c[t-1]``  = \\hat h^{t-1}_{m,c}
* ``u[t-1]``        = u^{t-1}_m
* ``h_a[t-1]``      = h^t_{m,a}
* ``h_hat_a[t-1]``  = \\hat h^{t-1}_{m,a}

and evaluates

    L_s = (1/T) sum_t sum_m ||r^t_m||^2 + xi_m ||D^t_m||^2
    r^t_m = h^t_{m,a} - h^t_{m,s}
    D^t_m = A_mm (\\hat h^{t-1}_{m,a} - \\hat h^{t-1}_{m,c}) - sum_{n != m} Ahat_mn \\hat h^{t-1}_{n,c}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError
from .systems import BlockPartition, GlobalSystem


@dataclass
class CrossBlockEstimates:
    """Server-held off-diagonal blocks, keyed by (m, n) with m != n."""

    A_hat: dict[tuple[int, int], np.ndarray]
    B_hat: dict[tuple[int, int], np.ndarray]

    def __post_init__(self) -> None:
        for key in list(self.A_hat) + list(self.B_hat):
            if key[0] == key[1]:
                raise ValueError(f"diagonal block {key} cannot be estimated by the server")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.A_hat)

    @classmethod
    def zeros(cls, partition: BlockPartition) -> "CrossBlockEstimates":
        M = partition.client_count
        P, U = partition.state_dims, partition.input_dims
        pairs = [(m, n) for m in range(M) for n in range(M) if m != n]
        return cls(
            {(m, n): np.zeros((P[m], P[n])) for m, n in pairs},
            {(m, n): np.zeros((P[m], U[n])) for m, n in pairs},
        )

    @classmethod
    def random(cls, partition: BlockPartition, rng: np.random.Generator, scale: float = 0.1) -> "CrossBlockEstimates":
        est = cls.zeros(partition)
        for key in est.pairs:
            est.A_hat[key] = scale * rng.standard_normal(est.A_hat[key].shape)
            est.B_hat[key] = scale * rng.standard_normal(est.B_hat[key].shape)
        return est

    @classmethod
    def from_system(cls, system: GlobalSystem) -> "CrossBlockEstimates":
        """Ground-truth off-diagonal blocks."""
        est = cls.zeros(system.partition)
        for m, n in est.pairs:
            est.A_hat[m, n] = system.block("A", m, n)
            est.B_hat[m, n] = system.block("B", m, n)
        return est

    def copy(self) -> "CrossBlockEstimates":
        return CrossBlockEstimates(
            {k: v.copy() for k, v in self.A_hat.items()},
            {k: v.copy() for k, v in self.B_hat.items()},
        )

    def frobenius_errors(self, system: GlobalSystem) -> dict[str, float]:
        out = {}
        for m, n in self.pairs:
            out[f"A_{m}{n}"] = float(np.linalg.norm(self.A_hat[m, n] - system.block("A", m, n)))
            out[f"B_{m}{n}"] = float(np.linalg.norm(self.B_hat[m, n] - system.block("B", m, n)))
        return out


@dataclass
class ClientUpload:
    """Everything the server knows about client m in one round."""

    h_hat_c: np.ndarray
    u: np.ndarray
    h_a: np.ndarray
    h_hat_a: np.ndarray

    @property
    def horizon(self) -> int:
        return self.h_a.shape[0]


@dataclass(frozen=True)
class DiagonalBlocks:
    A: np.ndarray
    B: np.ndarray


@dataclass
class ServerLossBreakdown:
    total: float
    residual_term: float
    disentangle_term: np.ndarray  # per-client D_m (without xi)
    xi: np.ndarray


@dataclass
class ServerGradients:
    A_hat: dict[tuple[int, int], np.ndarray]
    B_hat: dict[tuple[int, int], np.ndarray]
    g_h: list[np.ndarray]  # dL/dh^t_{m,a}, rows t = 1..T
    g_hhat: list[np.ndarray]  # dL/d\hat h^{t-1}_{m,a}, rows t = 1..T


@dataclass
class ALState:
    """Multipliers lambda^t_m (rows t = 1..T) and the penalty rho."""

    lambdas: list[np.ndarray]
    rho: float = 20.0

    def __post_init__(self) -> None:
        # rho = 0 is a plain Lagrangian; dual ascent still needs rho > 0
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    @classmethod
    def zeros(cls, partition: BlockPartition, horizon: int, rho: float = 20.0) -> "ALState":
        return cls([np.zeros((horizon, p)) for p in partition.state_dims], rho)

    def copy(self) -> "ALState":
        return ALState([lam.copy() for lam in self.lambdas], self.rho)


def server_predict(
    diag: Sequence[DiagonalBlocks],
    estimates: CrossBlockEstimates,
    h_hat_c_prev: Sequence[np.ndarray],
    u_prev: Sequence[np.ndarray],
    m: int,
) -> np.ndarray:
    """h^t_{m,s} from every client's \\hat h^{t-1}_{n,c} and u^{t-1}_n.

    Works on single vectors or on stacked (T, .) sequences.
    """
    M = len(diag)
    if len(h_hat_c_prev) != M or len(u_prev) != M:
        raise ValueError(f"server needs data from all {M} clients")
    pred = h_hat_c_prev[m] @ diag[m].A.T + u_prev[m] @ diag[m].B.T
    for n in range(M):
        if n != m:
            pred = pred + h_hat_c_prev[n] @ estimates.A_hat[m, n].T + u_prev[n] @ estimates.B_hat[m, n].T
    return pred


def _terms(uploads, diag, estimates):
    """Residuals r_m and disentanglement gaps D_m for every client."""
    M = len(diag)
    if len(uploads) != M:
        raise ValueError(f"expected uploads from {M} clients, got {len(uploads)}")
    hc = [up.h_hat_c for up in uploads]
    us = [up.u for up in uploads]
    residuals, gaps = [], []
    for m in range(M):
        x = np.zeros_like(uploads[m].h_a)
        for n in range(M):
            if n != m:
                x = x + hc[n] @ estimates.A_hat[m, n].T
        h_s = server_predict(diag, estimates, hc, us, m)
        residuals.append(uploads[m].h_a - h_s)
        gaps.append((uploads[m].h_hat_a - uploads[m].h_hat_c) @ diag[m].A.T - x)
    return residuals, gaps


def _as_xi(xi, M: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(xi, dtype=float), (M,)).copy()
    if np.any(arr < 0):
        raise ValueError("xi must be non-negative")
    return arr


def server_loss(
    uploads: Sequence[ClientUpload],
    diag: Sequence[DiagonalBlocks],
    estimates: CrossBlockEstimates,
    xi: float | Sequence[float],
) -> ServerLossBreakdown:
    residuals, gaps = _terms(uploads, diag, estimates)
    xi = _as_xi(xi, len(diag))
    residual_term = float(sum(np.mean(np.sum(r**2, axis=1)) for r in residuals))
    disentangle = np.array([np.mean(np.sum(g**2, axis=1)) for g in gaps])
    return ServerLossBreakdown(residual_term + float(xi @ disentangle), residual_term, disentangle, xi)


def disentanglement_gaps(uploads, diag, estimates) -> list[np.ndarray]:
    """D^t_m for every client, rows t = 1..T."""
    return _terms(uploads, diag, estimates)[1]


def _gradients(uploads, diag, estimates, multipliers, weights) -> ServerGradients:
    """Shared gradient code.

    The penalty method is the special case multipliers = 0 and
    weights = 2 xi of the augmented Lagrangian
    (1/T) sum ||r||^2 + lambda^T D + (rho/2) ||D||^2.
    """
    residuals, gaps = _terms(uploads, diag, estimates)
    M = len(diag)
    T = uploads[0].horizon
    # dual-weighted gap: lambda + rho D
    w = [multipliers[m] + weights[m] * gaps[m] for m in range(M)]
    g_h = [(2.0 / T) * residuals[m] for m in range(M)]
    g_hhat = [(1.0 / T) * w[m] @ diag[m].A for m in range(M)]
    grad_A, grad_B = {}, {}
    for m, n in estimates.pairs:
        grad_A[m, n] = -(1.0 / T) * (2.0 * residuals[m] + w[m]).T @ uploads[n].h_hat_c
        grad_B[m, n] = -(2.0 / T) * residuals[m].T @ uploads[n].u
    return ServerGradients(grad_A, grad_B, g_h, g_hhat)


def server_gradients(uploads, diag, estimates, xi) -> ServerGradients:
    """Gradients of L_s w.r.t. every Ahat_mn, Bhat_mn, h^t_{m,a} and \\hat h^{t-1}_{m,a}."""
    xi = _as_xi(xi, len(diag))
    zeros = [np.zeros_like(up.h_a) for up in uploads]
    return _gradients(uploads, diag, estimates, zeros, 2.0 * xi)


def grad_cross_blocks(uploads, diag, estimates, xi):
    g = server_gradients(uploads, diag, estimates, xi)
    return g.A_hat, g.B_hat


def grad_states(uploads, diag, estimates, xi):
    g = server_gradients(uploads, diag, estimates, xi)
    return g.g_h, g.g_hhat


def al_loss(uploads, diag, estimates, al: ALState) -> float:
    residuals, gaps = _terms(uploads, diag, estimates)
    T = uploads[0].horizon
    total = 0.0
    for m, (r, g) in enumerate(zip(residuals, gaps)):
        lam = al.lambdas[m]
        if lam.shape != g.shape:
            raise ValueError(f"multiplier shape {lam.shape} does not match gap {g.shape}")
        total += (np.sum(r**2) + np.sum(lam * g) + 0.5 * al.rho * np.sum(g**2)) / T
    return float(total)


def al_loss_and_grads(uploads, diag, estimates, al: ALState) -> tuple[float, ServerGradients]:
    M = len(diag)
    return al_loss(uploads, diag, estimates, al), _gradients(uploads, diag, estimates, al.lambdas, [al.rho] * M)


def al_dual_update(al: ALState, gaps: Sequence[np.ndarray]) -> ALState:
    """Dual ascent: lambda <- lambda + rho D."""
    if al.rho <= 0:
        raise ValueError("dual ascent needs rho > 0")
    return ALState([lam + al.rho * g for lam, g in zip(al.lambdas, gaps)], al.rho)


def update_blocks(
    estimates: CrossBlockEstimates,
    grads_A: dict,
    grads_B: dict,
    alpha_A: float,
    alpha_B: float,
    iteration: int | None = None,
) -> CrossBlockEstimates:
    """Block gradient descent on every off-diagonal estimate."""
    A_hat, B_hat = {}, {}
    for key in estimates.pairs:
        A_hat[key] = estimates.A_hat[key] - alpha_A * grads_A[key]
        B_hat[key] = estimates.B_hat[key] - alpha_B * grads_B[key]
        for name, block in (("A", A_hat[key]), ("B", B_hat[key])):
            if not np.all(np.isfinite(block)):
                raise DivergenceError(f"server block {name}_{key[0]}{key[1]}", iteration)
    return CrossBlockEstimates(A_hat, B_hat)
