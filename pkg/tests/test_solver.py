import numpy as np
import pytest
from hypothesis import given, strategies as st

from distdeblur.objective import LocalObjective
from distdeblur.operators import LocalBlurOperator
from distdeblur.psf import Psf, delta_psf
from distdeblur.solver import SolverConfig, minimize, prox_local

from oracles import active_set_qp, random_kernel, random_spd

FREE = SolverConfig(lower=None)


def quadratic(Q, b):
    def fun(x):
        g = Q @ x - b
        return 0.5 * x @ Q @ x - b @ x, g
    return fun


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    return f, np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])


def test_unit_quadratic_exact(rng):
    c = rng.standard_normal(8)
    x, rep = minimize(lambda x: (0.5 * np.sum((x - c) ** 2), x - c), np.zeros(8), FREE)
    assert np.max(np.abs(x - c)) <= 1e-8 and rep.iterations <= 3


def test_active_bound_kkt():
    x, rep = minimize(lambda x: (0.5 * (x[0] - 2) ** 2, x - 2), np.array([5.0]), SolverConfig(lower=3.0))
    assert x[0] == 3.0 and rep.reason == "converged"


def test_rosenbrock():
    x, rep = minimize(rosenbrock, np.array([-1.2, 1.0]), SolverConfig(lower=None, max_iter=200))
    assert np.max(np.abs(x - 1)) <= 1e-6


def test_active_set_oracle_six_variables(rng):
    for _ in range(20):
        Q = random_spd(rng, 6)
        b = rng.standard_normal(6) * 3
        want = active_set_qp(Q, b)
        x, _ = minimize(quadratic(Q, b), rng.random(6), SolverConfig(max_iter=500, gtol=1e-14))
        assert np.max(np.abs(x - want)) <= 1e-8


@pytest.mark.parametrize("d", [1, 3, 5])
def test_small_quadratics_finish_quickly(rng, d):
    Q, b = random_spd(rng, d, 10.0), rng.standard_normal(d)
    x, rep = minimize(quadratic(Q, b), np.zeros(d), SolverConfig(lower=None, memory=5, gtol=1e-14))
    assert np.max(np.abs(x - np.linalg.solve(Q, b))) <= 1e-10
    assert rep.iterations <= d + 2


def test_monotone_descent_and_feasibility(rng):
    Q, b = random_spd(rng, 30, 1e3), rng.standard_normal(30)
    seen = []

    def fun(x):
        seen.append(x.copy())
        return quadratic(Q, b)(x)

    values = [minimize(fun, np.ones(30), SolverConfig(max_iter=k))[1].value for k in range(25)]
    assert all(v1 <= v0 for v0, v1 in zip(values, values[1:]))
    assert min(float(s.min()) for s in seen) >= 0.0


def test_deterministic(rng):
    op = LocalBlurOperator(Psf(random_kernel(rng, 5)), (20, 20))
    obj = LocalObjective(3000 * rng.random(op.observed_shape), op, 1 / 400, 0.01)
    a, ra = minimize(obj.eval, np.full((20, 20), 1000.0), SolverConfig(max_iter=60))
    b, rb = minimize(obj.eval, np.full((20, 20), 1000.0), SolverConfig(max_iter=60))
    assert a.tobytes() == b.tobytes() and ra == rb


def test_budget_and_reports(rng):
    Q, b = random_spd(rng, 10, 1e4), rng.standard_normal(10)
    _, rep = minimize(quadratic(Q, b), np.zeros(10), SolverConfig(lower=None, max_iter=2))
    assert rep.iterations == 2 and rep.reason == "budget"
    with pytest.raises(FloatingPointError):
        minimize(lambda x: (np.nan, x), np.zeros(2))
    with pytest.raises(ValueError):
        SolverConfig(c1=0.5, c2=0.1)


def test_infeasible_start_is_projected():
    x, _ = minimize(lambda x: (0.5 * np.sum(x * x), x), np.array([-1.0, 2.0]), SolverConfig(max_iter=0))
    np.testing.assert_array_equal(x, [0.0, 2.0])


def test_prox_of_zero_function_is_projection(rng):
    op = LocalBlurOperator(delta_psf(1), (6, 6))
    zero = LocalObjective(np.zeros((6, 6)), op, 0.0)
    u = rng.standard_normal((6, 6))
    w, _ = prox_local(zero, u, 1.0, 50)
    np.testing.assert_allclose(w, np.maximum(u, 0), atol=1e-12)


def test_prox_of_quadratic_is_midpoint(rng):
    op = LocalBlurOperator(delta_psf(1), (5, 7))
    v, u = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    w, _ = prox_local(LocalObjective(v, op, 1.0), u, 1.0, 50, config=FREE)
    np.testing.assert_allclose(w, (u + v) / 2, atol=1e-10)


def test_prox_short_budget_vs_long_reference(rng):
    op = LocalBlurOperator(Psf(random_kernel(rng, 5)), (16, 16))
    truth = 3000 * rng.random((16, 16))
    obj = LocalObjective(op.apply(truth) + 20 * rng.standard_normal(op.observed_shape), op, 1 / 400, 1e-2)
    u, alpha = 3000 * rng.random((16, 16)), 1e-3 * rng.random((16, 16))
    ref, _ = prox_local(obj, u, alpha, 10_000, config=SolverConfig(gtol=1e-12))
    w, _ = prox_local(obj, u, alpha, 200)
    assert np.linalg.norm(w - ref) <= 1e-4 * np.linalg.norm(ref)


def test_prox_warm_start_is_used(rng):
    op = LocalBlurOperator(delta_psf(1), (4, 4))
    v = rng.random((4, 4))
    obj = LocalObjective(v, op, 1.0)
    u = np.zeros((4, 4))
    target = (u + v) / 2
    w, rep = prox_local(obj, u, 1.0, 0, warm_start=target)
    np.testing.assert_array_equal(w, target)


@given(st.integers(0, 2**31 - 1))
def test_random_bound_qp_property(seed):
    g = np.random.default_rng(seed)
    Q, b = random_spd(g, 4, 20.0), g.standard_normal(4)
    x, _ = minimize(quadratic(Q, b), g.random(4), SolverConfig(max_iter=300, gtol=1e-14))
    assert np.max(np.abs(x - active_set_qp(Q, b))) <= 1e-8
