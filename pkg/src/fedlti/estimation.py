"""Kalman filtering: per-client proprietary filters and the centralized oracle."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .systems import GlobalSystem, LocalBlocks


class SingularInnovationError(np.linalg.LinAlgError):
    """The innovation covariance S = C P C^T + R is numerically singular."""


@dataclass(frozen=True)
class KalmanBelief:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def standard(cls, dim: int) -> "KalmanBelief":
        """The default prior (0, I)."""
        return cls(np.zeros(dim), np.eye(dim))


@dataclass(frozen=True)
class KalmanStep:
    predicted: KalmanBelief
    refined: KalmanBelief
    gain: np.ndarray
    residual: np.ndarray


def kalman_step(
    belief: KalmanBelief,
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    u: np.ndarray,
    y: np.ndarray,
) -> KalmanStep:
    """One predict/update cycle with a Joseph-form covariance update."""
    mean = A @ belief.mean + B @ u
    cov = A @ belief.covariance @ A.T + Q
    cov = 0.5 * (cov + cov.T)

    S = C @ cov @ C.T + R
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    if eig[0] <= 1e-12 * max(1.0, eig[-1]):
        raise SingularInnovationError(f"innovation covariance is singular (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    K = np.linalg.solve(S, C @ cov).T
    residual = y - C @ mean
    refined_mean = mean + K @ residual
    I_KC = np.eye(cov.shape[0]) - K @ C
    refined_cov = I_KC @ cov @ I_KC.T + K @ R @ K.T
    refined_cov = 0.5 * (refined_cov + refined_cov.T)
    return KalmanStep(KalmanBelief(mean, cov), KalmanBelief(refined_mean, refined_cov), K, residual)


@dataclass
class FilterRun:
    """Output of a filter pass over t = 1..T.

    ``predicted[t-1]`` is h^t (from data up to t-1), ``refined[t]`` is
    \\hat h^t for t = 0..T (row 0 is the prior mean), ``residuals[t-1]`` is
    y^t - C h^t and ``gains[t-1]`` is K^t.
    """

    predicted: np.ndarray
    refined: np.ndarray
    residuals: np.ndarray
    gains: np.ndarray
    final_belief: KalmanBelief
    C: np.ndarray

    @property
    def horizon(self) -> int:
        return self.predicted.shape[0]

    @property
    def reconstructions(self) -> np.ndarray:
        return self.predicted @ self.C.T

    def residual_loss(self) -> float:
        """Time average of ||y^t - C h^t||^2."""
        return float(np.mean(np.sum(self.residuals**2, axis=1)))


# The same pass serves both flavours; the aliases document intent at call sites.
ProprietaryEstimates = FilterRun
OracleRun = FilterRun


def run_filter(
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    measurements: np.ndarray,
    inputs: np.ndarray,
    belief: KalmanBelief | None = None,
) -> FilterRun:
    measurements = np.asarray(measurements, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    T = measurements.shape[0]
    if T < 1:
        raise ValueError("horizon must be >= 1")
    if inputs.shape[0] != T:
        raise ValueError(f"{inputs.shape[0]} inputs for {T} measurements")
    P, D = A.shape[0], C.shape[0]
    if measurements.shape[1] != D or inputs.shape[1] != B.shape[1] or C.shape[1] != P:
        raise ValueError("block dimensions are inconsistent with the data")
    belief = KalmanBelief.standard(P) if belief is None else belief

    predicted = np.empty((T, P))
    refined = np.empty((T + 1, P))
    residuals = np.empty((T, D))
    gains = np.empty((T, P, D))
    refined[0] = belief.mean
    for t in range(T):
        step = kalman_step(belief, A, B, C, Q, R, inputs[t], measurements[t])
        predicted[t] = step.predicted.mean
        refined[t + 1] = step.refined.mean
        residuals[t] = step.residual
        gains[t] = step.gain
        belief = step.refined
    return FilterRun(predicted, refined, residuals, gains, belief, np.array(C))


def run_proprietary_filter(
    blocks: LocalBlocks,
    measurements: np.ndarray,
    inputs: np.ndarray,
    belief: KalmanBelief | None = None,
) -> FilterRun:
    """Kalman filter that only uses client m's diagonal blocks."""
    return run_filter(blocks.A, blocks.B, blocks.C, blocks.Q, blocks.R, measurements, inputs, belief)


def run_oracle_filter(
    system: GlobalSystem,
    measurements: np.ndarray,
    inputs: np.ndarray,
    belief: KalmanBelief | None = None,
) -> FilterRun:
    """Centralized Kalman filter with the full (A, B, C, Q, R)."""
    return run_filter(system.A, system.B, system.C, system.Q, system.R, measurements, inputs, belief)


def write_estimates_csv(path: str | Path, runs: dict[int, FilterRun]) -> None:
    """Long-format export: t, client, kind, component, value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "client", "kind", "component", "value"])
        for m in sorted(runs):
            run = runs[m]
            for t in range(1, run.horizon + 1):
                for i, x in enumerate(run.predicted[t - 1]):
                    writer.writerow([t, m, "predicted", i, repr(float(x))])
                for i, x in enumerate(run.refined[t]):
                    writer.writerow([t, m, "refined", i, repr(float(x))])
