"""Maximum likelihood fit of the separable model ``Sigma_i = sigma2 * Gamma_i (x) Omega_i``.

``Gamma_i`` (time) and ``Omega_i`` (space) are LEAR correlation matrices. The
variance and the fixed effects are profiled out: for given correlation
parameters ``beta`` is the GLS estimate and ``sigma2`` the mean weighted
residual square. The remaining four parameters are optimised on the
unconstrained scale ``(logit rho_t, log delta_t, logit rho_s, log delta_s)``
by safeguarded Newton-Raphson with a finite-difference Hessian.

Kronecker inverses are never formed: residuals are reshaped to ``t x s``
arrays and whitened from both sides with the factor Cholesky inverses.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, logit

from . import _newton
from .data import SPATIAL, TEMPORAL, Dataset, distance_scale, residuals
from .errors import (
    AllStartsInadmissible,
    DataError,
    DegenerateResiduals,
    DimensionMismatch,
    NonConvergence,
    NotPositiveDefinite,
    SingularNormalEquations,
)
from .lear import LearParams, NullParams, lear_corr, lear_corr_grad
from .numerics import CholFactor, cholesky, kron, log_det_pd

LOG_2PI = math.log(2.0 * math.pi)
BOUNDARY_TOL = 1e-3
RHO_CLAMP = (0.05, 0.95)


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    rel_tol: float = 1e-8
    grad_tol: float = 1e-6
    fd_step: float = 1e-5
    max_halvings: int = 20
    gradient: str = "analytic"  # or "fd": central differences of the profile log-likelihood

    def __post_init__(self):
        for name in ("max_iter", "rel_tol", "grad_tol", "fd_step", "max_halvings"):
            if not getattr(self, name) > 0:
                raise ValueError(f"FitOptions.{name} must be positive")
        if self.gradient not in ("analytic", "fd"):
            raise ValueError("FitOptions.gradient must be 'analytic' or 'fd'")


@dataclass
class NullFitResult:
    beta: np.ndarray
    params: NullParams
    loglik: float
    profile_loglik: float
    iterations: int
    converged: bool
    grad_norm: float
    warnings: list = field(default_factory=list)
    theta: np.ndarray = None
    history: list = field(default_factory=list)
    scales: tuple = None

    def covariance(self, subject) -> np.ndarray:
        """Fitted ``sigma2 * Gamma_i (x) Omega_i`` for one subject."""
        gamma, omega = subject_factors(self.scales, self.params.tau_t, self.params.tau_s, subject)
        return self.params.sigma2 * kron(gamma, omega)

    def summary(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "params": self.params.as_dict(),
            "loglik": self.loglik,
            "profile_loglik": self.profile_loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
        }


# -- factor construction ---------------------------------------------------

def scales_for(dataset: Dataset):
    return distance_scale(dataset, TEMPORAL), distance_scale(dataset, SPATIAL)


def subject_factors(scales, tau_t: LearParams, tau_s: LearParams, subject):
    """``(Gamma_i, Omega_i)`` for a subject or a pattern group."""
    dt = np.abs(subject.times[:, None] - subject.times[None, :])
    diff = subject.locs[:, None, :] - subject.locs[None, :, :]
    ds = np.sqrt(np.sum(diff**2, axis=-1))
    return lear_corr(dt, scales[0], tau_t), lear_corr(ds, scales[1], tau_s)


def null_factors(dataset: Dataset, tau, scales=None):
    """Per-pattern Cholesky factors ``(chol Gamma, chol Omega)``.

    Raises :class:`NotPositiveDefinite` if any factor correlation is not PD.
    """
    scales = scales or scales_for(dataset)
    cache_t, cache_s, out = {}, {}, []
    for pat in dataset.patterns:
        if pat.time_idx not in cache_t:
            cache_t[pat.time_idx] = cholesky(lear_corr(pat.time_dists(), scales[0], tau[0]))
        if pat.loc_idx not in cache_s:
            cache_s[pat.loc_idx] = cholesky(lear_corr(pat.loc_dists(), scales[1], tau[1]))
        out.append((cache_t[pat.time_idx], cache_s[pat.loc_idx]))
    return out


def _tri_inv(f: CholFactor) -> np.ndarray:
    return sla.solve_triangular(f.lower, np.eye(f.dim), lower=True)


def _whiten(pat, lg_inv, lo_inv, arr):
    """Apply ``(L_gamma (x) L_omega)^{-1}`` to stacked time-major vectors/matrices."""
    m = pat.size
    if arr.ndim == 2:
        a = arr.reshape(m, pat.t, pat.s)
        return np.einsum("jk,nkm,lm->njl", lg_inv, a, lo_inv, optimize=True).reshape(m, -1)
    p = arr.shape[-1]
    a = arr.reshape(m, pat.t, pat.s, p)
    return np.einsum("jk,nkmc,lm->njlc", lg_inv, a, lo_inv, optimize=True).reshape(m, -1, p)


def gls_beta(dataset: Dataset, factors) -> np.ndarray:
    """GLS estimate of ``beta`` given per-pattern factor Choleskys from :func:`null_factors`."""
    p = dataset.p
    xtwx = np.zeros((p, p))
    xtwy = np.zeros(p)
    for pat, (fg, fo) in zip(dataset.patterns, factors):
        lg_inv, lo_inv = _tri_inv(fg), _tri_inv(fo)
        xw = _whiten(pat, lg_inv, lo_inv, pat.x)
        yw = _whiten(pat, lg_inv, lo_inv, pat.y)
        xtwx += np.einsum("nic,nid->cd", xw, xw)
        xtwy += np.einsum("nic,ni->c", xw, yw)
    try:
        chol = np.linalg.cholesky(xtwx)
    except np.linalg.LinAlgError:
        raise SingularNormalEquations("weighted cross-product of the design is singular") from None
    if np.min(np.diag(chol)) ** 2 < 1e-12 * np.max(np.diag(xtwx)):
        raise SingularNormalEquations("weighted cross-product of the design is numerically singular")
    return sla.cho_solve((chol, True), xtwy)


def _check_beta(dataset, beta):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise DimensionMismatch(f"beta must have length {dataset.p}")
    return beta


def _logdet_and_quad(dataset, beta, factors):
    logdet = 0.0
    quad = 0.0
    for pat, (fg, fo) in zip(dataset.patterns, factors):
        logdet += pat.size * (pat.s * log_det_pd(fg) + pat.t * log_det_pd(fo))
        r = pat.y - pat.x @ beta
        rw = _whiten(pat, _tri_inv(fg), _tri_inv(fo), r)
        quad += float(np.sum(rw**2))
    return logdet, quad


def sigma2_hat(dataset: Dataset, beta, tau, scales=None) -> float:
    beta = _check_beta(dataset, beta)
    _, quad = _logdet_and_quad(dataset, beta, null_factors(dataset, tau, scales))
    return quad / dataset.n


def full_loglik(dataset: Dataset, beta, sigma2, tau, scales=None) -> float:
    if not sigma2 > 0:
        raise DataError("sigma2 must be positive")
    beta = _check_beta(dataset, beta)
    n = dataset.n
    logdet, quad = _logdet_and_quad(dataset, beta, null_factors(dataset, tau, scales))
    return -0.5 * n * LOG_2PI - 0.5 * (n * math.log(sigma2) + logdet) - quad / (2.0 * sigma2)


def _profile_from_parts(n, logdet, quad):
    if quad <= 0:
        raise DegenerateResiduals("weighted residual sum of squares is zero")
    return -0.5 * n * LOG_2PI - 0.5 * logdet - 0.5 * n * math.log(quad) - 0.5 * n * math.log(1.0 / n) - 0.5 * n


def profile_loglik(dataset: Dataset, beta, tau, scales=None) -> float:
    """Log-likelihood with ``sigma2`` replaced by :func:`sigma2_hat` (2*pi constant included)."""
    beta = _check_beta(dataset, beta)
    logdet, quad = _logdet_and_quad(dataset, beta, null_factors(dataset, tau, scales))
    return _profile_from_parts(dataset.n, logdet, quad)


# -- optimisation ------------------------------------------------------------

def theta_to_tau(theta):
    rho_t, rho_s = expit(theta[0]), expit(theta[2])
    # expit rounds to 1.0 for large arguments; keep strictly inside [0, 1)
    rho_t, rho_s = min(rho_t, np.nextafter(1.0, 0.0)), min(rho_s, np.nextafter(1.0, 0.0))
    return LearParams(float(rho_t), float(math.exp(theta[1]))), LearParams(float(rho_s), float(math.exp(theta[3])))


def tau_to_theta(tau):
    return np.array([logit(tau[0].rho), math.log(tau[0].delta), logit(tau[1].rho), math.log(tau[1].delta)])


class _NullObjective:
    """Profile log-likelihood in ``theta`` with ``beta`` re-estimated by GLS at every point."""

    def __init__(self, dataset, scales):
        self.dataset = dataset
        self.scales = scales
        self.n = dataset.n

    def _state(self, theta):
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > 700):
            return None
        tau = theta_to_tau(theta)
        try:
            factors = null_factors(self.dataset, tau, self.scales)
            beta = gls_beta(self.dataset, factors)
        except (NotPositiveDefinite, SingularNormalEquations):
            return None
        return tau, factors, beta

    def value(self, theta):
        st = self._state(theta)
        if st is None:
            return -np.inf
        tau, factors, beta = st
        logdet, quad = _logdet_and_quad(self.dataset, beta, factors)
        if quad <= 0:
            return -np.inf
        return _profile_from_parts(self.n, logdet, quad)

    def fd_grad(self, theta, step):
        g = np.empty(4)
        for k in range(4):
            e = np.zeros(4)
            e[k] = step
            fp, fm = self.value(theta + e), self.value(theta - e)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return None
            g[k] = (fp - fm) / (2 * step)
        return g

    def grad(self, theta):
        """Analytic gradient; ``beta`` is at its GLS optimum so it contributes nothing."""
        st = self._state(theta)
        if st is None:
            return None
        tau, factors, beta = st
        scales = self.scales
        derivs = {}
        g_logdet = np.zeros(4)
        g_quad = np.zeros(4)
        quad = 0.0
        for pat, (fg, fo) in zip(self.dataset.patterns, factors):
            m = pat.size
            g_inv = sla.cho_solve((fg.lower, True), np.eye(pat.t))
            o_inv = sla.cho_solve((fo.lower, True), np.eye(pat.s))
            r = (pat.y - pat.x @ beta).reshape(m, pat.t, pat.s)
            gr = g_inv @ r
            ro = r @ o_inv
            quad += float(np.sum(gr @ o_inv * r))
            bt = np.einsum("njl,lm,nkm->jk", gr, o_inv, gr)
            bs = np.einsum("njl,jk,nkm->lm", ro, g_inv, ro)
            key_t, key_s = ("t", pat.time_idx), ("s", pat.loc_idx)
            if key_t not in derivs:
                derivs[key_t] = (lear_corr_grad(pat.time_dists(), scales[0], tau[0])
                                 if pat.t > 1 and tau[0].rho > 0 else None)
            if key_s not in derivs:
                derivs[key_s] = (lear_corr_grad(pat.loc_dists(), scales[1], tau[1])
                                 if pat.s > 1 and tau[1].rho > 0 else None)
            for offset, key, inv, b, mult in ((0, key_t, g_inv, bt, pat.s), (2, key_s, o_inv, bs, pat.t)):
                d = derivs[key]
                if d is None:
                    continue
                for k in range(2):
                    g_logdet[offset + k] += m * mult * float(np.sum(inv * d[k]))
                    g_quad[offset + k] -= float(np.sum(d[k] * b))
        if quad <= 0:
            return None
        g_nat = -0.5 * g_logdet - 0.5 * self.n * g_quad / quad
        jac = np.array([tau[0].rho * (1 - tau[0].rho), tau[0].delta,
                        tau[1].rho * (1 - tau[1].rho), tau[1].delta])
        return g_nat * jac


def _lag_one_corr(dataset, beta, factor):
    num = ssa = ssb = 0.0
    for pat in dataset.patterns:
        r = (pat.y - pat.x @ beta).reshape(pat.size, pat.t, pat.s)
        if factor == TEMPORAL and pat.t > 1:
            a, b = r[:, :-1, :], r[:, 1:, :]
        elif factor == SPATIAL and pat.s > 1:
            a, b = r[:, :, :-1], r[:, :, 1:]
        else:
            continue
        num += float(np.sum(a * b))
        ssa += float(np.sum(a * a))
        ssb += float(np.sum(b * b))
    if ssa <= 0 or ssb <= 0:
        return 0.5
    return num / math.sqrt(ssa * ssb)


def starting_values(dataset: Dataset, scales):
    """Primary start plus AR(1) and compound-symmetry fallbacks, as ``theta`` vectors."""
    x = np.concatenate([s.x for s in dataset.subjects])
    y = np.concatenate([s.y for s in dataset.subjects])
    beta_ols = np.linalg.lstsq(x, y, rcond=None)[0]
    rhos = []
    for factor, scale in zip((TEMPORAL, SPATIAL), scales):
        c = _lag_one_corr(dataset, beta_ols, factor)
        rho = c ** (1.0 / scale.d_min) if c > 0 else RHO_CLAMP[0]
        rhos.append(float(np.clip(rho, *RHO_CLAMP)))
    spans = [sc.span if sc.span > 0 else 1.0 for sc in scales]
    starts = []
    for deltas in ([0.5 * spans[0], 0.5 * spans[1]], spans, [0.01 * spans[0], 0.01 * spans[1]]):
        tau = (LearParams(rhos[0], deltas[0]), LearParams(rhos[1], deltas[1]))
        starts.append(tau_to_theta(tau))
    return starts


def _boundary_warnings(tau, scales):
    out = []
    for name, par, scale in (("temporal", tau[0], scales[0]), ("spatial", tau[1], scales[1])):
        if par.rho < BOUNDARY_TOL or par.rho > 1 - BOUNDARY_TOL:
            out.append(f"{name} rho estimate {par.rho:.6g} is on the boundary of [0, 1); "
                       "the chi-square reference may be a mixture of chi-squares (boundary parameters)")
        if par.delta < BOUNDARY_TOL:
            out.append(f"{name} delta estimate {par.delta:.6g} is on the boundary delta = 0; "
                       "the chi-square reference may be a mixture of chi-squares (boundary parameters)")
        if scale.span == 0:
            out.append(f"{name} distances are all equal ({scale.d_min:g}); delta_{name[0]} is not identified")
    return out


def fit_null(dataset: Dataset, options: FitOptions = FitOptions()) -> NullFitResult:
    try:
        scales = scales_for(dataset)
    except DataError as exc:
        raise AllStartsInadmissible(f"separable model cannot be fitted: {exc}") from exc
    obj = _NullObjective(dataset, scales)
    if options.gradient == "fd":
        grad = lambda th: obj.fd_grad(th, options.fd_step)  # noqa: E731
    else:
        grad = obj.grad

    best = None
    for theta0 in starting_values(dataset, scales):
        if not np.isfinite(obj.value(theta0)):
            continue
        res = _newton.maximize(
            obj.value, grad, theta0,
            max_iter=options.max_iter, rel_tol=options.rel_tol, grad_tol=options.grad_tol,
            max_halvings=options.max_halvings, fd_step=options.fd_step,
        )
        if best is None or (res.converged, res.value) > (best.converged, best.value):
            best = res
        if res.converged:
            break
    if best is None:
        raise AllStartsInadmissible("no starting value gives positive definite LEAR factors")

    tau = theta_to_tau(best.theta)
    factors = null_factors(dataset, tau, scales)
    beta = gls_beta(dataset, factors)
    logdet, quad = _logdet_and_quad(dataset, beta, factors)
    if quad <= 0:
        raise DegenerateResiduals("weighted residual sum of squares is zero; the design interpolates the data")
    sigma2 = quad / dataset.n
    params = NullParams(tau[0], tau[1], sigma2)
    warnings = list(dataset.warnings) + _boundary_warnings(tau, scales)
    result = NullFitResult(
        beta=beta,
        params=params,
        loglik=full_loglik(dataset, beta, sigma2, tau, scales),
        profile_loglik=_profile_from_parts(dataset.n, logdet, quad),
        iterations=best.iterations,
        converged=best.converged,
        grad_norm=best.grad_norm,
        warnings=warnings,
        theta=best.theta,
        history=best.history,
        scales=scales,
    )
    if not best.converged:
        raise NonConvergence(f"separable LEAR fit did not converge: {best.message}", result)
    return result


__all__ = [
    "FitOptions", "NullFitResult", "full_loglik", "fit_null", "gls_beta", "null_factors",
    "profile_loglik", "residuals", "sigma2_hat", "starting_values",
]
