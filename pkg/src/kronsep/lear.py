"""Linear exponent autoregressive (LEAR) factor correlation matrices.

Off-diagonal correlation: ``rho ** (d_min + delta * (d - d_min) / (d_max - d_min))``.
``delta = d_max - d_min`` gives the continuous-time AR(1) ``rho ** d`` and
``delta = 0`` gives compound symmetry ``rho ** d_min``.
"""

from dataclasses import dataclass

import numpy as np

from .data import DistanceScale
from .errors import DomainError, NegativeDistance


@dataclass(frozen=True)
class LearParams:
    rho: float
    delta: float

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise DomainError(f"rho must lie in [0, 1), got {self.rho}")
        if not (self.delta >= 0.0 and np.isfinite(self.delta)):
            raise DomainError(f"delta must be a finite value >= 0, got {self.delta}")


@dataclass(frozen=True)
class NullParams:
    tau_t: LearParams
    tau_s: LearParams
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")

    def as_dict(self) -> dict:
        return {
            "rho_t": self.tau_t.rho,
            "delta_t": self.tau_t.delta,
            "rho_s": self.tau_s.rho,
            "delta_s": self.tau_s.delta,
            "sigma2": self.sigma2,
        }


def _check_dists(dists) -> np.ndarray:
    d = np.asarray(dists, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DomainError("distance matrix must be square")
    if np.isnan(d).any():
        raise DomainError("distance matrix contains NaN")
    if (d < 0).any():
        raise NegativeDistance("distances must be non-negative")
    return d


def lear_exponent(dists, scale: DistanceScale, delta: float) -> np.ndarray:
    """Exponent matrix; the scaled-distance multiplier is 0 when ``d_min == d_max``."""
    d = np.asarray(dists, dtype=float)
    if scale.span > 0:
        return scale.d_min + delta * (d - scale.d_min) / scale.span
    return np.full_like(d, scale.d_min)


def lear_corr(dists, scale: DistanceScale, params: LearParams) -> np.ndarray:
    d = _check_dists(dists)
    k = d.shape[0]
    if params.rho == 0.0:
        return np.eye(k)
    e = lear_exponent(d, scale, params.delta)
    np.fill_diagonal(e, 0.0)  # the diagonal exponent is irrelevant and can overflow
    return params.rho**e


def lear_corr_grad(dists, scale: DistanceScale, params: LearParams):
    """Entrywise derivatives ``(d corr / d rho, d corr / d delta)``; diagonals are 0."""
    d = _check_dists(dists)
    if params.rho <= 0.0:
        raise DomainError("LEAR gradient requires rho > 0")
    e = lear_exponent(d, scale, params.delta)
    np.fill_diagonal(e, 0.0)
    rho_e = params.rho**e
    d_rho = e * params.rho ** (e - 1.0)
    if scale.span > 0:
        d_delta = np.log(params.rho) * rho_e * (d - scale.d_min) / scale.span
    else:
        d_delta = np.zeros_like(d)
    np.fill_diagonal(d_rho, 0.0)
    np.fill_diagonal(d_delta, 0.0)
    return d_rho, d_delta
