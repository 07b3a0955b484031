"""Likelihood ratio test of separability with small-sample critical-value adjustments.

The adjusted test treats ``-2 ln Lambda`` as approximately ``k * chi2_nu`` and
so compares ``stat / k`` with ``chi2_nu``. Three variants are supported:
``none`` (``k = 1``), ``k1`` (a Mitchell-type mean correction) and ``k2``
(``N / (N - max t_i s_i)``).
"""

import math
from dataclasses import dataclass, field
from typing import Optional

from .errors import DomainError, FitNotConverged, NonConvergence, NonPositiveDf
from .fit_alt import AltFitResult, fit_alt
from .fit_null import FitOptions, NullFitResult, fit_null
from .numerics import chi2_isf, chi2_sf, digamma

ADJUSTMENTS = ("none", "k1", "k2")
N_NULL_PARAMS = 5  # sigma2, rho_t, delta_t, rho_s, delta_s
NEGATIVE_K1_WARNING = (
    "k1 adjustment is {k1:.6g} <= 0 for N = {N}, max(t_i s_i) = {M}; the k1-adjusted "
    "p-value is undefined (k1 fluctuates strongly and can be negative for some (N, M))"
)


@dataclass
class LrtResult:
    stat: float
    nu: int
    k1: float
    k2: float
    p_unadjusted: Optional[float]
    p_k1: Optional[float]
    p_k2: Optional[float]
    alpha: float
    decisions: dict
    warnings: list = field(default_factory=list)
    null_fit: Optional[NullFitResult] = None
    alt_fit: Optional[AltFitResult] = None

    def p_value(self, variant: str) -> Optional[float]:
        return {"none": self.p_unadjusted, "k1": self.p_k1, "k2": self.p_k2}[variant]

    def summary(self) -> dict:
        return {
            "stat": self.stat,
            "nu": self.nu,
            "k1": self.k1,
            "k2": self.k2,
            "p_unadjusted": self.p_unadjusted,
            "p_k1": self.p_k1,
            "p_k2": self.p_k2,
            "alpha": self.alpha,
            "decisions": dict(self.decisions),
        }


def lrt_statistic(null_fit: NullFitResult, alt_fit: AltFitResult) -> float:
    """``-2 ln Lambda = 2 (loglik_alt - loglik_null)``."""
    if not null_fit.converged:
        raise FitNotConverged("null (separable)")
    if not alt_fit.converged:
        raise FitNotConverged("alternative (unstructured)")
    return 2.0 * (alt_fit.loglik - null_fit.loglik)


def dof_lear(max_ts: int) -> int:
    if max_ts < 1:
        raise DomainError("max_ts must be >= 1")
    nu = max_ts * (max_ts + 1) // 2 - N_NULL_PARAMS
    if nu < 1:
        raise NonPositiveDf(f"max(t_i s_i) = {max_ts} leaves {nu} degrees of freedom")
    return nu


def dof_unstructured_factors(t_max: int, s_max: int) -> int:
    """Degrees of freedom when both factor matrices are unstructured under the null."""
    if t_max < 1 or s_max < 1:
        raise DomainError("grid dimensions must be >= 1")
    ts = t_max * s_max
    nu = ts * (ts + 1) // 2 - (t_max * (t_max + 1) // 2 + s_max * (s_max + 1) // 2 - 1)
    if nu < 1:
        raise NonPositiveDf(f"t = {t_max}, s = {s_max} leaves {nu} degrees of freedom")
    return nu


def _digamma_term(N, m):
    return m * math.log(2.0) + sum(digamma(0.5 * (N - j)) for j in range(1, m + 1)) - m * math.log(N)


def k_mitchell(N: int, t: int, s: int) -> float:
    """Mitchell-type mean correction for balanced data with unstructured factors."""
    ts = t * s
    if N <= ts:
        raise DomainError(f"need N > t*s, got N = {N}, t*s = {ts}")
    denom = ts * (ts + 1) / 2 - t * (t + 1) / 2 - s * (s + 1) / 2 + 1
    if denom == 0:
        raise DomainError(f"correction denominator vanishes for t = {t}, s = {s}")
    num = -N * _digamma_term(N, ts) - (N / (N - 1)) * (t * (t + 1) / 2 + s * (s + 1) / 2 + ts - 1)
    return num / denom


def k1_adjust(N: int, max_ts: int) -> float:
    m = max_ts
    if N <= m:
        raise DomainError(f"need N > max(t_i s_i), got N = {N}, max = {m}")
    denom = m * (m + 1) / 2 - N_NULL_PARAMS
    if denom == 0:
        raise DomainError(f"k1 denominator vanishes for max(t_i s_i) = {m}")
    num = -N * _digamma_term(N, m) - (N / (N - 1)) * (m + N_NULL_PARAMS)
    return num / denom


def k2_adjust(N: int, max_ts: int) -> float:
    if N <= max_ts:
        raise DomainError(f"need N > max(t_i s_i), got N = {N}, max = {max_ts}")
    return N / (N - max_ts)


def adjusted_p(stat: float, k: float, nu: int) -> float:
    return chi2_sf(max(stat, 0.0) / k, nu)


def critical_value(alpha: float, k: float, nu: int) -> float:
    """Rejection threshold for ``stat`` itself: ``k`` times the upper-alpha chi-square quantile."""
    return k * chi2_isf(alpha, nu)


def lrt_from_fits(null_fit, alt_fit, N, max_ts, alpha=0.05, adjustments=ADJUSTMENTS) -> LrtResult:
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    unknown = set(adjustments) - set(ADJUSTMENTS)
    if unknown:
        raise ValueError(f"unknown adjustment(s): {sorted(unknown)}")
    stat = lrt_statistic(null_fit, alt_fit)
    nu = dof_lear(max_ts)
    k2 = k2_adjust(N, max_ts)
    k1 = k1_adjust(N, max_ts)
    warnings = list(null_fit.warnings)
    for w in alt_fit.warnings:
        if w not in warnings:
            warnings.append(w)
    if stat < 0:
        warnings.append(f"-2 ln Lambda = {stat:.3g} is negative; the alternative fit may be a local maximum")
    p = {"none": None, "k1": None, "k2": None}
    decisions = {}
    for variant in adjustments:
        if variant == "none":
            p["none"] = adjusted_p(stat, 1.0, nu)
        elif variant == "k2":
            p["k2"] = adjusted_p(stat, k2, nu)
        elif k1 > 0:
            p["k1"] = adjusted_p(stat, k1, nu)
        else:
            warnings.append(NEGATIVE_K1_WARNING.format(k1=k1, N=N, M=max_ts))
        decisions[variant] = p[variant] is not None and p[variant] < alpha
    return LrtResult(
        stat=stat, nu=nu, k1=k1, k2=k2,
        p_unadjusted=p["none"], p_k1=p["k1"], p_k2=p["k2"],
        alpha=alpha, decisions=decisions, warnings=warnings,
        null_fit=null_fit, alt_fit=alt_fit,
    )


def run_test(dataset, alpha: float = 0.05, adjustments=ADJUSTMENTS, options: FitOptions = FitOptions()) -> LrtResult:
    """Fit both models and assemble the (adjusted) likelihood ratio test."""
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    try:
        null_fit = fit_null(dataset, options)
    except NonConvergence as exc:
        raise FitNotConverged("null (separable)", f"null (separable) fit did not converge: {exc}") from exc
    try:
        alt_fit = fit_alt(dataset, options)
    except NonConvergence as exc:
        raise FitNotConverged("alternative (unstructured)", str(exc)) from exc
    return lrt_from_fits(null_fit, alt_fit, dataset.N, dataset.max_ts, alpha, adjustments)
