"""Limited-memory BFGS with a strong-Wolfe line search.

Minimizes f(x) given a callable returning (value, gradient). Two-loop
recursion with configurable memory; the line search brackets and zooms
per Nocedal & Wright (Algs. 3.5/3.6), accepting only strictly improving
steps, so iterates are monotone by construction. On line-search failure
the memory is dropped and a steepest-descent restart is attempted once;
if that also fails the best-so-far point is returned with a warning
rather than raising.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    stop_reason: str
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _wolfe_line_search(phi, f0, dphi0, c1, c2, alpha0, max_evals=30):
    """Strong-Wolfe search on phi(a) -> (f, dphi). Returns (a, f, g) or None."""

    def zoom(alo, flo, dlo, ahi, fhi):
        best = None
        for _ in range(max_evals):
            a = 0.5 * (alo + ahi)
            f, d, g = phi(a)
            if f > f0 + c1 * a * dphi0 or f >= flo:
                ahi, fhi = a, f
            else:
                if abs(d) <= -c2 * dphi0:
                    return a, f, g
                best = (a, f, g)
                if d * (ahi - alo) >= 0:
                    ahi, fhi = alo, flo
                alo, flo, dlo = a, f, d
            if abs(ahi - alo) <= 1e-12 * max(1.0, abs(alo)):
                break
        # fall back to the best sufficient-decrease point seen, if any
        if best is not None and best[1] < f0:
            return best
        if flo < f0 and alo > 0:
            f, d, g = phi(alo)
            return alo, f, g
        return None

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = alpha0
    for i in range(max_evals):
        f, d, g = phi(a)
        if f > f0 + c1 * a * dphi0 or (i > 0 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f)
        if abs(d) <= -c2 * dphi0:
            return a, f, g
        if d >= 0:
            return zoom(a, f, d, a_prev, f_prev)
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    return None


def minimize_lbfgs(fun, x0, memory=10, max_iter=300, grad_tol=1e-6,
                   c1=1e-4, c2=0.9, callback=None) -> OptimResult:
    """Minimize fun(x) -> (f, g) from x0.

    Stops when the gradient infinity norm drops below `grad_tol`, after
    `max_iter` accepted iterations, or when the line search is exhausted
    (recorded as a warning, never an exception).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    n_eval = 1
    trace = [float(f)]
    warnings = []
    s_hist, y_hist, rho_hist = [], [], []
    gamma = 1.0
    stop_reason = "max_iterations"
    converged = False

    def two_loop(grad):
        q = grad.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q

    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < grad_tol:
            stop_reason = "gradient_tolerance"
            converged = True
            break

        p = -two_loop(g)
        dphi0 = float(g @ p)
        if dphi0 >= 0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            gamma = 1.0
            p = -g
            dphi0 = float(g @ p)
            if dphi0 >= 0:
                stop_reason = "zero_gradient"
                converged = True
                break

        cache = {}

        def phi(a):
            nonlocal n_eval
            if a not in cache:
                fa, ga = fun(x + a * p)
                n_eval += 1
                cache[a] = (float(fa), ga)
            fa, ga = cache[a]
            return fa, float(ga @ p), ga

        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(gnorm, 1e-8))
        res = _wolfe_line_search(phi, f, dphi0, c1, c2, alpha0)
        if res is None and s_hist:
            # restart: drop curvature memory, retry along steepest descent
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            gamma = 1.0
            p = -g
            dphi0 = float(g @ p)
            cache.clear()
            res = _wolfe_line_search(phi, f, dphi0, c1, c2,
                                     min(1.0, 1.0 / max(gnorm, 1e-8)))
        if res is None:
            warnings.append("line search exhausted; returning best iterate")
            stop_reason = "line_search_exhausted"
            break

        alpha, f_new, g_new = res
        s = alpha * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            gamma = sy / float(y @ y)
            if len(s_hist) > memory:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        x = x + s
        f, g = f_new, g_new
        trace.append(float(f))
        it += 1
        if callback is not None:
            callback(x, f)

    return OptimResult(x=x, fun=float(f), grad=g, n_iter=it, n_eval=n_eval,
                       converged=converged, stop_reason=stop_reason,
                       trace=trace, warnings=warnings)
