"""Augmented client model.

Client m keeps its proprietary estimates \\hat h_{m,c} fixed and learns

    h^t_{m,a}      = A_mm \\hat h^{t-1}_{m,a} + B_mm u^{t-1}_m + phi_m
    \\hat h^t_{m,a} = \\hat h^t_{m,c} + theta_m y^t_m

with loss L_{m,a} = (1/T) sum_t ||y^t_m - C_mm h^t_{m,a}||^2. There is no
measurement at t = 0; the package uses y^0 := 0 so that
\\hat h^0_{m,a} = \\hat h^0_{m,c} unless an explicit override is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError


@dataclass
class AugmentedParams:
    theta: np.ndarray  # (P_m, D_m)
    phi: np.ndarray  # (P_m,)

    @classmethod
    def zeros(cls, state_dim: int, measurement_dim: int) -> "AugmentedParams":
        return cls(np.zeros((state_dim, measurement_dim)), np.zeros(state_dim))

    @classmethod
    def random(cls, state_dim: int, measurement_dim: int, rng: np.random.Generator, scale: float = 0.1) -> "AugmentedParams":
        theta = scale * rng.standard_normal((state_dim, measurement_dim))
        phi = scale * rng.standard_normal(state_dim)
        return cls(theta, phi)

    def copy(self) -> "AugmentedParams":
        return AugmentedParams(self.theta.copy(), self.phi.copy())


@dataclass(frozen=True)
class LearningRates:
    """Client step sizes: eta for theta, gamma for phi; 1 = local loss, 2 = server loss."""

    eta1: float = 1e-2
    eta2: float = 1e-2
    gamma1: float = 1e-2
    gamma2: float = 1e-2

    def __post_init__(self) -> None:
        for name in ("eta1", "eta2", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"learning rate {name} must be non-negative")

    def scaled(self, factor: float) -> "LearningRates":
        return LearningRates(self.eta1 * factor, self.eta2 * factor, self.gamma1 * factor, self.gamma2 * factor)


@dataclass
class ClientForwardTrace:
    """Augmented pass over t = 1..T.

    ``h_a[t-1]`` is h^t_{m,a}; ``h_hat_a[t]`` is \\hat h^t_{m,a} for t = 0..T;
    ``y_prev[t-1]`` is y^{t-1}_m (row 0 is y^0).
    """

    h_a: np.ndarray
    h_hat_a: np.ndarray
    y_tilde: np.ndarray
    residuals: np.ndarray
    y_prev: np.ndarray
    loss: float

    @property
    def horizon(self) -> int:
        return self.h_a.shape[0]


def previous_measurements(measurements: np.ndarray, y0: np.ndarray | None = None) -> np.ndarray:
    """Rows y^0..y^{T-1} given rows y^1..y^T."""
    measurements = np.asarray(measurements, dtype=float)
    first = np.zeros(measurements.shape[1]) if y0 is None else np.asarray(y0, dtype=float)
    return np.vstack([first[None, :], measurements[:-1]])


def augmented_forward(
    params: AugmentedParams,
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    h_hat_c: np.ndarray,
    inputs: np.ndarray,
    measurements: np.ndarray,
    y0: np.ndarray | None = None,
    h_hat_a0: np.ndarray | None = None,
) -> ClientForwardTrace:
    """Run the augmented client model.

    Parameters
    ----------
    h_hat_c:
        Proprietary refined estimates, shape (T+1, P_m), rows t = 0..T.
    inputs, measurements:
        u^0..u^{T-1} and y^1..y^T for this client.
    y0:
        Measurement preceding the window (default zero).
    h_hat_a0:
        Override for \\hat h^0_{m,a}. Treated as a constant, so gradients
        are only exact when it equals h_hat_c[0] + theta @ y0.
    """
    h_hat_c = np.asarray(h_hat_c, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    measurements = np.asarray(measurements, dtype=float)
    T = measurements.shape[0]
    P, D = params.theta.shape
    if h_hat_c.shape != (T + 1, P):
        raise ValueError(f"h_hat_c has shape {h_hat_c.shape}, expected {(T + 1, P)}")
    if inputs.shape != (T, B.shape[1]) or measurements.shape[1] != D or C.shape != (D, P):
        raise ValueError("client data and blocks have inconsistent dimensions")

    y_prev = previous_measurements(measurements, y0)
    h_hat_a = np.empty((T + 1, P))
    h_hat_a[0] = h_hat_c[0] + params.theta @ y_prev[0] if h_hat_a0 is None else h_hat_a0
    h_hat_a[1:] = h_hat_c[1:] + measurements @ params.theta.T
    h_a = h_hat_a[:-1] @ A.T + inputs @ B.T + params.phi
    y_tilde = h_a @ C.T
    residuals = measurements - y_tilde
    loss = float(np.mean(np.sum(residuals**2, axis=1)))
    return ClientForwardTrace(h_a, h_hat_a, y_tilde, residuals, y_prev, loss)


def client_local_gradients(trace: ClientForwardTrace, A: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of L_{m,a} with respect to (theta, phi).

    grad_theta = -(2/T) sum_t (C A)^T r^t (y^{t-1})^T
    grad_phi   = -(2/T) sum_t C^T r^t
    """
    T = trace.horizon
    CA = C @ A
    grad_theta = -(2.0 / T) * CA.T @ trace.residuals.T @ trace.y_prev
    grad_phi = -(2.0 / T) * C.T @ trace.residuals.sum(axis=0)
    return grad_theta, grad_phi


def chain_rule_server_gradients(
    g_h: np.ndarray,
    g_hhat: np.ndarray | None,
    A: np.ndarray,
    y_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Map server state-gradients onto (theta, phi).

    ``g_h[t-1]`` is dL_s/dh^t_{m,a} and ``g_hhat[t-1]`` is
    dL_s/d\\hat h^{t-1}_{m,a}; both already include the 1/T factor, so the
    result is a plain sum over t. ``g_hhat=None`` drops the second term.
    """
    g_h = np.asarray(g_h, dtype=float)
    y_prev = np.asarray(y_prev, dtype=float)
    if g_h.shape[0] != y_prev.shape[0]:
        raise ValueError(f"{g_h.shape[0]} gradient rows for {y_prev.shape[0]} measurements")
    state_grad = g_h @ A
    if g_hhat is not None:
        g_hhat = np.asarray(g_hhat, dtype=float)
        if g_hhat.shape != g_h.shape:
            raise ValueError("g_h and g_hhat must have the same shape")
        state_grad = state_grad + g_hhat
    return state_grad.T @ y_prev, g_h.sum(axis=0)


def update_params(
    params: AugmentedParams,
    local_grads: tuple[np.ndarray, np.ndarray],
    server_grads: tuple[np.ndarray, np.ndarray],
    rates: LearningRates,
    client: int | None = None,
    iteration: int | None = None,
) -> AugmentedParams:
    g_theta_local, g_phi_local = local_grads
    g_theta_server, g_phi_server = server_grads
    theta = params.theta - rates.eta1 * g_theta_local - rates.eta2 * g_theta_server
    phi = params.phi - rates.gamma1 * g_phi_local - rates.gamma2 * g_phi_server
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        who = f"client {client} parameters" if client is not None else "client parameters"
        raise DivergenceError(who, iteration)
    return AugmentedParams(theta, phi)
