"""Maximum likelihood fit of the unstructured alternative for unbalanced data.

One covariance matrix lives on the maximal ``t_max x s_max`` grid (time-major,
dimension ``D``); every subject sees the principal submatrix of the cells it
observes. The matrix is parameterised by its log-Cholesky vector (lower
triangle in row-major order, diagonal entries stored as logs), so any real
vector gives a positive definite matrix.

``beta`` is profiled out by GLS at every evaluation. Gradient and Hessian with
respect to the log-Cholesky vector are both analytic, so each Newton step costs
one pass over the pattern groups.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import _newton
from .data import Dataset
from .errors import (
    DimensionMismatch,
    NonConvergence,
    NotPositiveDefinite,
    SingularNormalEquations,
    UnidentifiedCell,
)
from .fit_null import FitOptions
from .numerics import cholesky

LOG_2PI = math.log(2.0 * math.pi)
# smallest eigenvalue relative to the mean variance below which the fitted
# covariance is treated as collapsing onto a singular matrix
DEGENERACY_RATIO = 1e-8


@dataclass(frozen=True)
class MaxGridCov:
    t_max: int
    s_max: int
    theta: np.ndarray

    def __post_init__(self):
        d = self.t_max * self.s_max
        if self.theta.shape != (d * (d + 1) // 2,):
            raise DimensionMismatch(f"log-Cholesky vector must have length {d * (d + 1) // 2}")
        if not np.all(np.isfinite(self.theta)):
            raise NotPositiveDefinite("log-Cholesky vector has non-finite entries")

    @property
    def dim(self) -> int:
        return self.t_max * self.s_max

    def lower(self) -> np.ndarray:
        return theta_to_lower(self.theta, self.dim)

    def matrix(self) -> np.ndarray:
        low = self.lower()
        return low @ low.T

    @classmethod
    def from_matrix(cls, cov, t_max, s_max):
        return cls(t_max, s_max, lower_to_theta(cholesky(cov).lower))

    @classmethod
    def identity(cls, t_max, s_max):
        d = t_max * s_max
        return cls(t_max, s_max, np.zeros(d * (d + 1) // 2))


def _tril(d):
    return np.tril_indices(d)


def theta_to_lower(theta, d) -> np.ndarray:
    rows, cols = _tril(d)
    low = np.zeros((d, d))
    low[rows, cols] = theta
    diag = np.arange(d)
    low[diag, diag] = np.exp(low[diag, diag])
    return low


def lower_to_theta(low) -> np.ndarray:
    d = low.shape[0]
    rows, cols = _tril(d)
    theta = low[rows, cols].copy()
    theta[rows == cols] = np.log(theta[rows == cols])
    return theta


def subject_cells(subject, s_max) -> np.ndarray:
    return (np.asarray(subject.time_grid_idx)[:, None] * s_max + np.asarray(subject.loc_grid_idx)[None, :]).ravel()


def select_submatrix(cov: MaxGridCov, subject) -> np.ndarray:
    if subject.time_grid_idx.max() >= cov.t_max or subject.loc_grid_idx.max() >= cov.s_max:
        raise IndexError(f"subject {subject.id!r} lies outside the {cov.t_max} x {cov.s_max} grid")
    idx = subject_cells(subject, cov.s_max)
    return cov.matrix()[np.ix_(idx, idx)]


@dataclass
class AltFitResult:
    beta: np.ndarray
    cov: MaxGridCov
    loglik: float
    iterations: int
    converged: bool
    grad_norm: float
    warnings: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "n_cov_params": int(self.cov.theta.size),
            "cov": self.cov.matrix().tolist(),
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
        }


class _AltObjective:
    """Log-likelihood of the unstructured model as a function of the log-Cholesky vector."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.d = dataset.t_max * dataset.s_max
        self.rows, self.cols = _tril(self.d)
        self.diag_mask = self.rows == self.cols
        self.cells = [pat.cells(dataset.s_max) for pat in dataset.patterns]
        self.const = -0.5 * dataset.n * LOG_2PI

    def _inverses(self, sigma):
        """Per pattern ``(Sigma_p^{-1}, log|Sigma_p|)``; ``None`` if any block is not PD."""
        out = []
        for idx in self.cells:
            block = sigma[np.ix_(idx, idx)]
            try:
                low = np.linalg.cholesky(block)
            except np.linalg.LinAlgError:
                return None
            diag = np.diag(low)
            if np.any(diag <= 0):
                return None
            inv = sla.cho_solve((low, True), np.eye(len(idx)))
            out.append((inv, 2.0 * float(np.sum(np.log(diag)))))
        return out

    def beta_for(self, inverses) -> np.ndarray:
        p = self.dataset.p
        xtwx = np.zeros((p, p))
        xtwy = np.zeros(p)
        for pat, (inv, _) in zip(self.dataset.patterns, inverses):
            wx = np.einsum("ij,njc->nic", inv, pat.x)
            xtwx += np.einsum("nic,nid->cd", pat.x, wx)
            xtwy += np.einsum("nic,ni->c", wx, pat.y)
        try:
            return np.linalg.solve(xtwx, xtwy)
        except np.linalg.LinAlgError:
            raise SingularNormalEquations("weighted cross-product of the design is singular") from None

    def loglik(self, inverses, beta) -> float:
        total = self.const
        for pat, (inv, logdet) in zip(self.dataset.patterns, inverses):
            r = pat.y - pat.x @ beta
            total -= 0.5 * (pat.size * logdet + float(np.sum((r @ inv) * r)))
        return total

    def _state(self, theta):
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta[self.diag_mask])) > 300:
            return None
        low = theta_to_lower(theta, self.d)
        sigma = low @ low.T
        inverses = self._inverses(sigma)
        if inverses is None:
            return None
        try:
            beta = self.beta_for(inverses)
        except SingularNormalEquations:
            return None
        return low, inverses, beta

    def value(self, theta) -> float:
        st = self._state(theta)
        if st is None:
            return -np.inf
        return self.loglik(st[1], st[2])

    def grad(self, theta):
        st = self._state(theta)
        if st is None:
            return None
        low, inverses, beta = st
        gmat = np.zeros((self.d, self.d))
        for pat, idx, (inv, _) in zip(self.dataset.patterns, self.cells, inverses):
            r = pat.y - pat.x @ beta
            wr = r @ inv
            gmat[np.ix_(idx, idx)] += 0.5 * (wr.T @ wr - pat.size * inv)
        dlow = 2.0 * gmat @ low
        g = dlow[self.rows, self.cols]
        g[self.diag_mask] *= low[np.arange(self.d), np.arange(self.d)]
        return g

    def hessian(self, theta):
        """Exact Hessian of the ``beta``-profiled log-likelihood in the log-Cholesky vector.

        Per pattern, with ``P = Sigma_p^{-1}``, ``Q = P S P`` and a parameter
        direction ``A_a = u_a v_a' + v_a u_a'`` (``u_a`` a unit vector, ``v_a`` a
        scaled column of ``L``), the first-order part is
        ``1/2 [m tr(P A_a P A_b) - tr(P A_a Q A_b) - tr(P A_b Q A_a)]``. The
        second-order part of ``Sigma = L L'`` and the log-diagonal chain rule are
        added afterwards, and profiling ``beta`` subtracts ``H_tb H_bb^-1 H_bt``.
        """
        st = self._state(theta)
        if st is None:
            return None
        low, inverses, beta = st
        rows, cols = self.rows, self.cols
        k, p = rows.size, self.dataset.p
        diag_pos = np.flatnonzero(self.diag_mask)
        chain = np.ones(k)
        chain[diag_pos] = low[rows[diag_pos], cols[diag_pos]]
        vfull = low[:, cols].T * chain[:, None]  # row a: chain_a * L[:, col_a]
        h = np.zeros((k, k))
        h_tb = np.zeros((k, p))
        h_bb = np.zeros((p, p))
        gmat = np.zeros((self.d, self.d))
        loc = np.empty(self.d, dtype=int)
        for pat, idx, (inv, _) in zip(self.dataset.patterns, self.cells, inverses):
            m = pat.size
            r = pat.y - pat.x @ beta
            pr = r @ inv
            q = pr.T @ pr
            gmat[np.ix_(idx, idx)] += 0.5 * (q - m * inv)
            loc.fill(-1)
            loc[idx] = np.arange(len(idx))
            act = np.flatnonzero(loc[rows] >= 0)
            ua = loc[rows[act]]
            v = vfull[act][:, idx]
            upu = inv[np.ix_(ua, ua)]
            upv = inv[ua] @ v.T
            vpv = v @ inv @ v.T
            uqu = q[np.ix_(ua, ua)]
            uqv = q[ua] @ v.T
            vqv = v @ q @ v.T
            t_p = 2.0 * (upu * vpv + upv * upv.T)
            t_q = uqv.T * upv + vqv * upu + uqu * vpv + uqv * upv.T
            h[np.ix_(act, act)] += 0.5 * (m * t_p - t_q - t_q.T)
            px = np.einsum("ij,njc->nic", inv, pat.x)
            xpu = px[:, ua, :]
            xpv = np.einsum("nic,ai->nac", px, v)
            h_tb[act] -= np.einsum("nac,na->ac", xpu, pr @ v.T) + np.einsum("nac,na->ac", xpv, pr[:, ua])
            h_bb -= np.einsum("njc,njd->cd", pat.x, px)
        same_col = cols[:, None] == cols[None, :]
        h += 2.0 * gmat[rows[:, None], rows[None, :]] * same_col * np.outer(chain, chain)
        dl = (2.0 * gmat @ low)[rows, cols]
        h[diag_pos, diag_pos] += chain[diag_pos] * dl[diag_pos]
        h -= h_tb @ np.linalg.solve(h_bb, h_tb.T)
        return 0.5 * (h + h.T)


def gls_beta_alt(dataset: Dataset, cov: MaxGridCov) -> np.ndarray:
    obj = _AltObjective(dataset)
    inverses = obj._inverses(cov.matrix())
    if inverses is None:
        raise NotPositiveDefinite("a subject covariance block is not positive definite")
    return obj.beta_for(inverses)


def loglik_alt(dataset: Dataset, cov: MaxGridCov, beta) -> float:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise DimensionMismatch(f"beta must have length {dataset.p}")
    obj = _AltObjective(dataset)
    inverses = obj._inverses(cov.matrix())
    if inverses is None:
        raise NotPositiveDefinite("a subject covariance block is not positive definite")
    return obj.loglik(inverses, beta)


def available_case_cov(dataset: Dataset, beta=None) -> np.ndarray:
    """Pooled available-case covariance of residuals on the maximal grid.

    Entry ``(a, b)`` averages ``r_a r_b`` over subjects observing both cells;
    pairs never observed together are set to 0. Raises
    :class:`UnidentifiedCell` for a cell no subject observes.
    """
    d = dataset.t_max * dataset.s_max
    if beta is None:
        x = np.concatenate([s.x for s in dataset.subjects])
        y = np.concatenate([s.y for s in dataset.subjects])
        beta = np.linalg.lstsq(x, y, rcond=None)[0]
    sums = np.zeros((d, d))
    counts = np.zeros((d, d))
    for pat in dataset.patterns:
        idx = pat.cells(dataset.s_max)
        r = pat.y - pat.x @ beta
        sums[np.ix_(idx, idx)] += r.T @ r
        counts[np.ix_(idx, idx)] += pat.size
    missing = np.flatnonzero(np.diag(counts) == 0)
    if missing.size:
        cell = int(missing[0])
        raise UnidentifiedCell(divmod(cell, dataset.s_max))
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return 0.5 * (cov + cov.T)


def ridge_to_pd(cov) -> np.ndarray:
    """Add ``eps * I`` (``eps = 1e-6 * mean diagonal``, doubling) until Cholesky succeeds."""
    eps = 1e-6 * max(float(np.mean(np.diag(cov))), 1e-12)
    eye = np.eye(cov.shape[0])
    try:
        cholesky(cov)
        return cov
    except NotPositiveDefinite:
        pass
    for _ in range(200):
        cand = cov + eps * eye
        try:
            cholesky(cand)
            return cand
        except NotPositiveDefinite:
            eps *= 2.0
    raise NotPositiveDefinite("could not ridge-inflate the starting covariance")


NONCONVERGENCE_HINT = (
    "the data do not appear to support an unstructured covariance model; "
    "a more parsimonious covariance model (such as the separable Kronecker LEAR structure) "
    "is indicated"
)


def fit_alt(dataset: Dataset, options: FitOptions = FitOptions(), start: MaxGridCov = None) -> AltFitResult:
    obj = _AltObjective(dataset)
    if start is None:
        start_cov = ridge_to_pd(available_case_cov(dataset))
        theta0 = lower_to_theta(cholesky(start_cov).lower)
    else:
        theta0 = np.asarray(start.theta, dtype=float)
    def degenerate(theta):
        sigma = MaxGridCov(dataset.t_max, dataset.s_max, theta).matrix()
        ratio = float(np.linalg.eigvalsh(sigma)[0]) / float(np.mean(np.diag(sigma)))
        if ratio < DEGENERACY_RATIO:
            return (f"covariance is collapsing onto a singular matrix (smallest eigenvalue "
                    f"{ratio:.2g} of the mean variance), so the likelihood appears unbounded")
        return None

    res = _newton.maximize(
        obj.value, obj.grad, theta0,
        max_iter=options.max_iter, rel_tol=options.rel_tol, grad_tol=options.grad_tol,
        max_halvings=options.max_halvings, hessian=obj.hessian, should_stop=degenerate,
    )
    cov = MaxGridCov(dataset.t_max, dataset.s_max, res.theta)
    st = obj._state(res.theta)
    beta = st[2] if st is not None else np.full(dataset.p, np.nan)
    result = AltFitResult(
        beta=beta,
        cov=cov,
        loglik=res.value,
        iterations=res.iterations,
        converged=res.converged,
        grad_norm=res.grad_norm,
        warnings=list(dataset.warnings),
        history=res.history,
    )
    if not res.converged:
        raise NonConvergence(
            f"unstructured covariance fit ({theta0.size} covariance parameters) did not converge: "
            f"{res.message}; {NONCONVERGENCE_HINT}",
            result,
        )
    return result
