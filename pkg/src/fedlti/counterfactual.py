"""Average treatment effects of input interventions.

Three analytic levels are provided:

* measurement (true blocks):   C_mm B_mn (u1 - u0)
* server state (learned):      Bhat_mn (u1 - u0)
* client aggregate:            C_mm (phi1 - phi0)

plus a Monte-Carlo do-intervention that abducts the state posterior at
t-1 with the centralized filter, sets u_n^{t-1} to u0 or u1, and predicts
y_m^t under both settings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimation import run_oracle_filter
from .rng import substream
from .server import CrossBlockEstimates
from .systems import GlobalSystem, Trajectory, simulate

LEVELS = ("measurement", "state", "client_aggregate")


@dataclass(frozen=True)
class AteQuery:
    """do(u_n^{t-1} = u1) versus do(u_n^{t-1} = u0), read at client m and time t.

    For the client-aggregate level ``source`` is None and u0/u1 hold phi0/phi1.
    """

    target: int
    source: int | None
    u0: np.ndarray
    u1: np.ndarray
    time: int = 1

    def __post_init__(self) -> None:
        if self.source is not None and self.source == self.target:
            raise ValueError("source and target clients must differ")
        if self.time < 1:
            raise ValueError("effects are read at t >= 1")
        object.__setattr__(self, "u0", np.atleast_1d(np.asarray(self.u0, dtype=float)))
        object.__setattr__(self, "u1", np.atleast_1d(np.asarray(self.u1, dtype=float)))
        if self.u0.shape != self.u1.shape:
            raise ValueError("u0 and u1 must have the same shape")

    @property
    def delta(self) -> np.ndarray:
        return self.u1 - self.u0


@dataclass
class AteResult:
    effect: np.ndarray
    level: str
    estimator: str
    standard_error: np.ndarray | None = None
    # per-trial differences, kept only when requested
    samples: np.ndarray | None = None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coordinate", "effect", "stderr"])
            for i, e in enumerate(self.effect):
                se = "" if self.standard_error is None else repr(float(self.standard_error[i]))
                writer.writerow([i, repr(float(e)), se])


def _check(matrix: np.ndarray, vec: np.ndarray, what: str) -> None:
    if matrix.ndim != 2 or matrix.shape[1] != vec.shape[0]:
        raise ValueError(f"{what}: matrix {matrix.shape} does not act on a vector of length {vec.shape[0]}")


def ate_measurement(C_mm, B_mn, u0, u1) -> AteResult:
    C_mm, B_mn = np.atleast_2d(np.asarray(C_mm, dtype=float)), np.atleast_2d(np.asarray(B_mn, dtype=float))
    delta = np.atleast_1d(np.asarray(u1, dtype=float) - np.asarray(u0, dtype=float))
    _check(B_mn, delta, "B_mn")
    if C_mm.shape[1] != B_mn.shape[0]:
        raise ValueError(f"C_mm {C_mm.shape} and B_mn {B_mn.shape} do not compose")
    return AteResult(C_mm @ B_mn @ delta, "measurement", "analytic")


def ate_state_server(B_hat_mn, u0, u1) -> AteResult:
    if B_hat_mn is None:
        raise KeyError("no estimate for the requested block")
    B_hat_mn = np.atleast_2d(np.asarray(B_hat_mn, dtype=float))
    delta = np.atleast_1d(np.asarray(u1, dtype=float) - np.asarray(u0, dtype=float))
    _check(B_hat_mn, delta, "B_hat_mn")
    return AteResult(B_hat_mn @ delta, "state", "analytic")


def ate_client_phi(C_mm, phi0, phi1) -> AteResult:
    C_mm = np.atleast_2d(np.asarray(C_mm, dtype=float))
    delta = np.atleast_1d(np.asarray(phi1, dtype=float) - np.asarray(phi0, dtype=float))
    _check(C_mm, delta, "C_mm")
    return AteResult(C_mm @ delta, "client_aggregate", "analytic")


def ate_from_estimates(estimates: CrossBlockEstimates, query: AteQuery) -> AteResult:
    if query.source is None:
        raise ValueError("server-level effects need a source client")
    return ate_state_server(estimates.B_hat.get((query.target, query.source)), query.u0, query.u1)


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def monte_carlo_ate(
    system: GlobalSystem,
    query: AteQuery,
    trials: int,
    seed: int,
    trajectory: Trajectory | None = None,
    paired: bool = True,
    keep_samples: bool = False,
) -> AteResult:
    """Abduction-action-prediction estimate of the measurement-level ATE.

    Abduction: the centralized filter's posterior of h^{t-1} given
    y^1..y^{t-1} (the prior when t = 1). Action: u^{t-1} equals the observed
    input except that client ``source`` receives u0 or u1. Prediction:
    y_m^t = C_m (A h^{t-1} + B u^{t-1} + w) + v_m with fresh h^{t-1}, w, v.

    ``paired`` shares (h^{t-1}, w, v) between the two arms, so every trial
    difference is the exact linear effect; otherwise the arms use
    independent draws and the standard error is the usual two-sample one.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    if query.source is None:
        raise ValueError("monte_carlo_ate needs a source client")
    p = system.partition
    m, n, t = query.target, query.source, query.time
    if query.u0.shape != (p.input_dims[n],):
        raise ValueError(f"client {n} has {p.input_dims[n]} inputs, query has {query.u0.shape[0]}")
    if trajectory is None:
        trajectory = simulate(system, max(t, 1), seed)
    if t > trajectory.horizon:
        raise ValueError(f"time {t} lies beyond the trajectory horizon {trajectory.horizon}")

    if t == 1:
        mean, cov = np.zeros(p.P), np.eye(p.P)
    else:
        run = run_oracle_filter(system, trajectory.measurements[: t - 1], trajectory.inputs[: t - 1])
        mean, cov = run.final_belief.mean, run.final_belief.covariance
    base_u = trajectory.inputs[t - 1].copy()
    rows = p.slice("measurement", m)
    C_m = system.C[rows]

    def arm(u_value: np.ndarray, key: str) -> np.ndarray:
        rng = substream(seed, "ate", key)
        h = mean + rng.standard_normal((trials, p.P)) @ _sqrt_psd(cov).T
        w = rng.standard_normal((trials, p.P)) @ _sqrt_psd(system.Q).T
        v = rng.standard_normal((trials, p.D)) @ _sqrt_psd(system.R).T
        u = base_u.copy()
        u[p.slice("input", n)] = u_value
        return (h @ system.A.T + u @ system.B.T + w) @ C_m.T + v[:, rows]

    y1 = arm(query.u1, "common" if paired else "treated")
    y0 = arm(query.u0, "common" if paired else "control")
    diff = y1 - y0
    effect = diff.mean(axis=0)
    if paired:
        se = diff.std(axis=0, ddof=1) / np.sqrt(trials)
    else:
        se = np.sqrt(y1.var(axis=0, ddof=1) / trials + y0.var(axis=0, ddof=1) / trials)
    return AteResult(effect, "measurement", "monte_carlo", se, diff if keep_samples else None)
