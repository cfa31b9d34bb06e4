import numpy as np
import pytest

from photorecon.core import minimize_lbfgs


def quadratic(A, b):
    def fun(x):
        r = A @ x - b
        return 0.5 * float(r @ r), A.T @ r
    return fun


def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([
        -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1 - x[0]),
        200.0 * (x[1] - x[0] ** 2),
    ])
    return f, g


def test_quadratic_converges():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(12, 12))
    A = A @ A.T + 0.5 * np.eye(12)
    b = rng.normal(size=12)
    fun = quadratic(A, b)
    res = minimize_lbfgs(fun, np.zeros(12), grad_tol=1e-6, max_iter=200)
    assert res.converged
    x_star = np.linalg.solve(A, b)
    assert np.allclose(res.x, x_star, atol=1e-6)


def test_rosenbrock_converges():
    res = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), grad_tol=1e-8, max_iter=300)
    assert res.x == pytest.approx([1.0, 1.0], abs=1e-5)


def test_trace_is_monotone_nonincreasing():
    res = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=300)
    t = np.array(res.trace)
    assert np.all(np.diff(t) <= 0.0)


def test_at_optimum_stops_cleanly():
    fun = quadratic(np.eye(3), np.zeros(3))
    res = minimize_lbfgs(fun, np.zeros(3))
    assert res.converged
    assert res.n_iter == 0


def test_line_search_exhaustion_returns_best():
    # |x| is non-smooth at the optimum; the search must not raise
    def absfun(x):
        return float(np.abs(x).sum()), np.sign(x)

    res = minimize_lbfgs(absfun, np.array([1.0]), max_iter=100)
    assert res.fun <= 1.0
    assert res.stop_reason in ("line_search_exhausted", "max_iterations",
                               "gradient_tolerance", "zero_gradient")


def test_iteration_cap_respected():
    res = minimize_lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=3)
    assert res.n_iter <= 3
