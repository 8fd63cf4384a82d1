"""
Offline comparison tightenings computed from the noise description.

All three propagate the open-loop prediction error e_{τ+1} = A e_τ + w
(no feedback gain) and tighten row r at step τ by a multiple or a quantile of
H_r e_τ.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import bisect
from scipy.special import ndtr

from errors import DimensionError, DomainError
from services.plant import AffineConstraint, NoiseModel, RngStream, sample_noise_batch
from services.smpc import TighteningVector

QUANTILE_XTOL = 1e-12


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def error_covariance_ladder(A: np.ndarray, Sigma_w: np.ndarray, horizon: int) -> np.ndarray:
    """Σ_τ for τ = 0..N-1, stacked along the first axis."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    Sigma_w = np.asarray(Sigma_w, dtype=float).reshape(d, d)
    ladder = np.zeros((horizon, d, d))
    for tau in range(1, horizon):
        ladder[tau] = A @ ladder[tau - 1] @ A.T + Sigma_w
    return ladder


def _row_std(ladder: np.ndarray, constraint: AffineConstraint) -> np.ndarray:
    H = constraint.H
    if ladder.shape[1] != H.shape[1]:
        raise DimensionError("constraint does not match the state dimension")
    var = np.einsum("rj,tjk,rk->tr", H, ladder, H)
    return np.sqrt(np.maximum(var, 0.0))


def chebyshev_tightening(
    A: np.ndarray,
    Sigma_w: np.ndarray,
    constraint: AffineConstraint,
    delta: float,
    horizon: int,
) -> TighteningVector:
    _check_delta(delta)
    std = _row_std(error_covariance_ladder(A, Sigma_w, horizon), constraint)
    return TighteningVector(np.sqrt((1.0 - delta) / delta) * std)


def normal_quantile(p: float) -> float:
    """z with Φ(z) = p, by bisection."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    return float(bisect(lambda z: ndtr(z) - p, -40.0, 40.0, xtol=QUANTILE_XTOL))


def gaussian_tightening(
    A: np.ndarray,
    Sigma_w: np.ndarray,
    constraint: AffineConstraint,
    delta: float,
    horizon: int,
) -> TighteningVector:
    _check_delta(delta)
    std = _row_std(error_covariance_ladder(A, Sigma_w, horizon), constraint)
    return TighteningVector(normal_quantile(1.0 - delta) * std)


def scenario_tightening(
    A: np.ndarray,
    noise: NoiseModel,
    constraint: AffineConstraint,
    delta: float,
    horizon: int,
    samples: int,
    rng: RngStream,
) -> tuple[TighteningVector, RngStream]:
    """Empirical ⌈(1-δ)M⌉-th order statistic of H_r e_τ over M sampled error trajectories."""
    _check_delta(delta)
    need = math.ceil(10.0 / delta - 1e-9)
    if samples < need:
        raise DomainError(f"scenario tightening needs at least {need} samples for delta={delta}, got {samples}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    w, rng = sample_noise_batch(noise, rng, samples * horizon)
    w = w.reshape(samples, horizon, d)
    errors = np.zeros((samples, horizon, d))
    for tau in range(1, horizon):
        errors[:, tau] = errors[:, tau - 1] @ A.T + w[:, tau - 1]
    projected = errors @ constraint.H.T
    order = math.ceil((1.0 - delta) * samples - 1e-9)
    g = np.sort(projected, axis=0)[order - 1]
    return TighteningVector(g), rng
