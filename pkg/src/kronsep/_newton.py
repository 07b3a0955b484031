"""Safeguarded Newton / secant ascent used by both model fits."""

from dataclasses import dataclass, field

import numpy as np

# relative size below which changes in the objective are treated as rounding noise
VALUE_RESOLUTION = 1e-12


@dataclass
class AscentResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: list = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def fd_hessian(grad, theta, g0, step):
    """Forward-difference Jacobian of ``grad`` at ``theta``, symmetrised.

    Falls back to a backward difference for coordinates whose forward point is
    inadmissible (``grad`` returns ``None``).
    """
    k = theta.size
    h = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        gj = grad(theta + e)
        if gj is not None:
            h[:, j] = (gj - g0) / step
            continue
        gj = grad(theta - e)
        if gj is None:
            h[:, j] = 0.0
            h[j, j] = -1.0
        else:
            h[:, j] = (g0 - gj) / step
    return 0.5 * (h + h.T)


def _negative_definite(h):
    """Shift ``h`` down the diagonal until ``-h`` has a Cholesky factor."""
    a = -h
    scale = max(float(np.max(np.abs(np.diag(a)))), 1e-8)
    shift = 0.0
    for _ in range(80):
        try:
            return np.linalg.cholesky(a + shift * np.eye(a.shape[0]))
        except np.linalg.LinAlgError:
            shift = 1e-6 * scale if shift == 0.0 else shift * 4.0
    raise np.linalg.LinAlgError("could not regularise Hessian")


def maximize(fun, grad, theta0, *, max_iter, rel_tol, grad_tol, max_halvings,
             hessian=None, fd_step=1e-5, max_step=10.0, method="newton", on_iterate=None,
             should_stop=None):
    """Maximise ``fun`` from ``theta0``.

    ``fun`` returns ``-inf`` at inadmissible points and ``grad`` returns ``None``.
    ``method="newton"`` uses ``hessian`` (or a forward-difference Hessian of
    ``grad``) shifted to negative definite; ``method="bfgs"`` uses damped
    secant updates of the inverse curvature. Steps are halved until the
    objective does not decrease. Convergence requires both a relative change
    below ``rel_tol`` and ``||grad|| < grad_tol``. ``should_stop(theta)`` may
    return a message to abandon the ascent after an accepted step.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    f = fun(theta)
    if not np.isfinite(f):
        return AscentResult(theta, f, np.full(theta.size, np.nan), 0, False,
                            "starting point is inadmissible")
    g = grad(theta)
    history = [f]
    rel_change = np.inf
    inv_curv = None
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if method == "bfgs":
            if inv_curv is None:
                inv_curv = np.eye(theta.size) / max(gnorm, 1.0)
            step = inv_curv @ g
        else:
            h = hessian(theta) if hessian is not None else fd_hessian(grad, theta, g, fd_step)
            chol = _negative_definite(h)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
        predicted = float(g @ step)
        if gnorm < grad_tol and (rel_change < rel_tol or predicted < rel_tol * max(1.0, abs(f))):
            return AscentResult(theta, f, g, it, True, "converged", history)
        norm = float(np.linalg.norm(step))
        if norm > max_step:
            step *= max_step / norm
        alpha = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = theta + alpha * step
            fc = fun(cand)
            if np.isfinite(fc) and fc >= f:
                accepted = True
                break
            alpha *= 0.5
        if not accepted and predicted < VALUE_RESOLUTION * max(1.0, abs(f)):
            # the objective cannot resolve the remaining gain; judge the step by the gradient
            cand = theta + step
            gc = grad(cand)
            if gc is not None and np.isfinite(fun(cand)) and np.linalg.norm(gc) < gnorm:
                rel_change = 0.0
                theta, g = cand, gc
                f = fun(cand)
                history.append(f)
                continue
        if not accepted:
            if gnorm < grad_tol:
                return AscentResult(theta, f, g, it, True, "converged (no further ascent possible)", history)
            if method == "bfgs" and inv_curv is not None:
                inv_curv = None  # restart from steepest ascent
                rel_change = np.inf
                continue
            return AscentResult(theta, f, g, it, False, "line search failed to find an ascent step", history)
        gc = grad(cand)
        if gc is None:
            return AscentResult(theta, f, g, it, False, "gradient undefined at accepted point", history)
        if method == "bfgs":
            s = cand - theta
            y = g - gc  # gradient change of the minimisation problem -fun
            sy = float(s @ y)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
                if it == 0:
                    inv_curv = np.eye(theta.size) * (sy / float(y @ y))
                rho = 1.0 / sy
                v = np.eye(theta.size) - rho * np.outer(s, y)
                inv_curv = v @ inv_curv @ v.T + rho * np.outer(s, s)
        rel_change = abs(fc - f) / max(1.0, abs(f))
        theta, f, g = cand, fc, gc
        history.append(f)
        if on_iterate is not None:
            on_iterate(it, theta, f)
        if should_stop is not None:
            reason = should_stop(theta)
            if reason:
                return AscentResult(theta, f, g, it + 1, False, reason, history)
    gnorm = float(np.linalg.norm(g))
    if gnorm < grad_tol and rel_change < rel_tol:
        return AscentResult(theta, f, g, max_iter, True, "converged", history)
    return AscentResult(theta, f, g, max_iter, False,
                        f"maximum iterations ({max_iter}) reached; gradient norm {gnorm:.3g}", history)
