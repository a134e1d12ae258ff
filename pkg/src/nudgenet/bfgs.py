"""Full-memory BFGS with a strong-Wolfe line search.

The inverse Hessian approximation is kept dense and updated with the
standard rank-two formula; updates are skipped whenever the curvature
condition s.y > 1e-12 ||s|| ||y|| fails, so the approximation stays
symmetric positive definite.  A line-search failure triggers one
curvature reset (H = I, steepest descent retry); if that also fails the
best iterate found so far is returned with a warning flag instead of an
exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
CURVATURE_SKIP = 1e-12


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool
    n_fun_evals: int
    n_grad_evals: int
    fun_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)
    stopped_by_callback: bool = False


class _Evals:
    """Wraps the objective/gradient pair and counts evaluations."""

    def __init__(self, objective, gradient):
        self.objective = objective
        self.gradient = gradient
        self.n_f = 0
        self.n_g = 0

    def f(self, x):
        self.n_f += 1
        return float(self.objective(x))

    def g(self, x):
        self.n_g += 1
        return np.asarray(self.gradient(x), dtype=np.float64)


def _zoom(ev, x, p, f0, dphi0, a_lo, a_hi, phi_lo, max_iter=40):
    """Refine a bracketing interval until the strong Wolfe conditions hold."""
    for _ in range(max_iter):
        # Bisection keeps the search robust when the objective misbehaves
        # (non-finite trial values shrink the interval like any rejection).
        a = 0.5 * (a_lo + a_hi)
        if abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(a_lo)):
            break
        phi = ev.f(x + a * p)
        if not np.isfinite(phi) or phi > f0 + WOLFE_C1 * a * dphi0 or phi >= phi_lo:
            a_hi = a
            continue
        g = ev.g(x + a * p)
        dphi = float(g @ p)
        if abs(dphi) <= -WOLFE_C2 * dphi0:
            return a, phi, g
        if dphi * (a_hi - a_lo) >= 0:
            a_hi = a_lo
        a_lo, phi_lo = a, phi
    return None


def _line_search(ev, x, p, f0, g0, alpha0):
    """Strong Wolfe search (c1 = 1e-4, c2 = 0.9).

    Returns ``(alpha, f_new, g_new)`` or ``None`` on failure.  Non-finite
    trial values are treated as sufficient-decrease violations so the
    search backs off rather than propagating overflow.
    """
    dphi0 = float(g0 @ p)
    if not np.isfinite(dphi0) or dphi0 >= 0:
        return None
    a_prev, phi_prev = 0.0, f0
    a = alpha0
    for it in range(30):
        phi = ev.f(x + a * p)
        if not np.isfinite(phi) or phi > f0 + WOLFE_C1 * a * dphi0 or (
            phi >= phi_prev and it > 0
        ):
            return _zoom(ev, x, p, f0, dphi0, a_prev, a, phi_prev)
        g = ev.g(x + a * p)
        dphi = float(g @ p)
        if abs(dphi) <= -WOLFE_C2 * dphi0:
            return a, phi, g
        if dphi >= 0:
            return _zoom(ev, x, p, f0, dphi0, a, a_prev, phi)
        a_prev, phi_prev = a, phi
        a = min(2.0 * a, 1e10)
    return None


def bfgs_minimize(
    objective,
    gradient,
    x0,
    tol: float = 1e-8,
    max_iters: int = 1000,
    callback=None,
    check_grad: bool = False,
) -> tuple[np.ndarray, BfgsResult]:
    """Minimize ``objective`` starting from ``x0``.

    Terminates when the gradient 2-norm drops below ``tol``, the
    iteration cap is hit, the optional ``callback(k, x, f, grad_norm)``
    returns True, or the line search fails after a curvature reset.
    The returned point never has a larger objective than ``x0``.

    ``check_grad`` runs one central-difference probe of ``gradient``
    against ``objective`` at ``x0`` before optimizing (debug aid).
    """
    ev = _Evals(objective, gradient)
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size

    if check_grad:
        rng = np.random.default_rng(0)
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        fd = (ev.f(x + h * v) - ev.f(x - h * v)) / (2 * h)
        an = float(ev.g(x) @ v)
        denom = max(abs(fd), abs(an), 1e-12)
        if abs(fd - an) / denom > 1e-4:
            raise ValueError(
                f"gradient check failed: finite difference {fd:.6e} vs "
                f"analytic {an:.6e}"
            )

    f = ev.f(x)
    g = ev.g(x)
    gnorm = float(np.linalg.norm(g))
    result = BfgsResult(
        x=x,
        fun=f,
        grad_norm=gnorm,
        iterations=0,
        converged=gnorm <= tol,
        line_search_failed=False,
        n_fun_evals=0,
        n_grad_evals=0,
    )
    result.fun_history.append(f)
    result.grad_norm_history.append(gnorm)
    if callback is not None and callback(0, x, f, gnorm):
        result.stopped_by_callback = True
    if result.converged or result.stopped_by_callback:
        result.n_fun_evals, result.n_grad_evals = ev.n_f, ev.n_g
        return x, result

    H = np.eye(n)
    first_update = True
    for k in range(1, max_iters + 1):
        p = -(H @ g)
        if float(p @ g) >= 0:
            # Defensive: numerically lost positive definiteness.
            H = np.eye(n)
            first_update = True
            p = -g
        alpha0 = min(1.0, 1.0 / max(1.0, gnorm)) if k == 1 else 1.0
        ls = _line_search(ev, x, p, f, g, alpha0)
        if ls is None:
            # Curvature reset: retry once along steepest descent.
            H = np.eye(n)
            first_update = True
            p = -g
            ls = _line_search(ev, x, p, f, g, min(1.0, 1.0 / max(1.0, gnorm)))
            if ls is None:
                result.line_search_failed = True
                break
        alpha, f_new, g_new = ls
        s = alpha * p
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        gnorm = float(np.linalg.norm(g))
        result.x, result.fun, result.grad_norm = x, f, gnorm
        result.iterations = k
        result.fun_history.append(f)
        result.grad_norm_history.append(gnorm)
        if callback is not None and callback(k, x, f, gnorm):
            result.stopped_by_callback = True
            break
        if gnorm <= tol:
            result.converged = True
            break
        sy = float(s @ y)
        if sy > CURVATURE_SKIP * np.linalg.norm(s) * np.linalg.norm(y):
            if first_update:
                H = (sy / float(y @ y)) * np.eye(n)
                first_update = False
            Hy = H @ y
            rho = 1.0 / sy
            H += rho * (1.0 + rho * float(y @ Hy)) * np.outer(s, s)
            H -= rho * (np.outer(s, Hy) + np.outer(Hy, s))
        # else: curvature condition failed, keep the previous H.

    result.n_fun_evals, result.n_grad_evals = ev.n_f, ev.n_g
    return result.x, result
