"""Dense symmetric linear algebra, Kronecker helpers, special functions and RNG streams.

Positive definiteness is only ever checked through Cholesky pivots. Special
functions are thin, domain-checked wrappers over :mod:`scipy.special`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import special

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor ``L`` with ``L @ L.T == a``."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def cholesky(a) -> CholFactor:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = max(np.max(np.abs(a)), 1.0) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise DomainError("cholesky needs a symmetric matrix")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(lower) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return CholFactor(lower)


def log_det_pd(f: CholFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def solve_pd(f: CholFactor, b):
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"factor has dim {f.dim}, right-hand side has {b.shape[0]} rows")
    return sla.cho_solve((f.lower, True), b)


def kron(a, b) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def kron_logdet(gamma, omega) -> float:
    """``log|gamma (x) omega|`` without forming the Kronecker product."""
    gamma = np.asarray(gamma, dtype=float)
    omega = np.asarray(omega, dtype=float)
    t, s = gamma.shape[0], omega.shape[0]
    return s * log_det_pd(cholesky(gamma)) + t * log_det_pd(cholesky(omega))


def digamma(x: float) -> float:
    if not np.isfinite(x) or x <= 0:
        raise DomainError(f"digamma is only defined here for x > 0, got {x}")
    return float(special.psi(x))


def chi2_sf(x: float, nu: int) -> float:
    """Upper tail ``P(chi2_nu >= x)`` via the regularized upper incomplete gamma."""
    if nu < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {nu}")
    if np.isnan(x) or x < 0:
        raise DomainError(f"chi-square statistic must be >= 0, got {x}")
    if x == 0:
        return 1.0
    return float(special.gammaincc(0.5 * nu, 0.5 * x))


def chi2_isf(q: float, nu: int) -> float:
    """Upper-tail quantile, the inverse of :func:`chi2_sf`."""
    if not 0 < q < 1:
        raise DomainError(f"tail probability must lie in (0, 1), got {q}")
    return float(2.0 * special.gammainccinv(0.5 * nu, q))


@dataclass
class RngStream:
    """Independent, reproducible normal/uniform stream keyed by ``(seed, stream_id)``.

    Uses PCG64 seeded through ``SeedSequence(seed, spawn_key=(stream_id,))`` so
    streams never overlap and do not depend on scheduling. Normals come from
    numpy's ziggurat sampler.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def choice(self, n, k):
        """``k`` distinct integers from ``range(n)``, in draw order."""
        return self._gen.choice(n, size=k, replace=False)

    def integers(self, low, high, size=None):
        """Uniform integers on ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)


def mvn_sample(mean, cov_factor: CholFactor, rng: RngStream, size=None) -> np.ndarray:
    """Draw ``mean + L z``; with ``size`` returns a ``(size, dim)`` array of draws."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape[-1] != cov_factor.dim:
        raise DimensionMismatch("mean and covariance factor have different dimensions")
    if size is None:
        return mean + cov_factor.lower @ rng.normal(cov_factor.dim)
    z = rng.normal((size, cov_factor.dim))
    return mean + z @ cov_factor.lower.T
