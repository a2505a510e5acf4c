import math

import numpy as np
import pytest

from ldpms.action import LatticePath, v1_energy
from ldpms.coeffs import (CoefficientField, LevyMeasure, builtin_suite, constant, jump_zero, trig)
from ldpms.errors import ConvergenceError, InputError
from ldpms.rate import (RateEstimate, RateOptions, convexity_check, estimate_J, minimize_action,
                        path_space_infimum, rate_function, write_rate_table)

GAUSS, EMPTY = builtin_suite("gaussian", 2)


def wiggled(L, n, x, z, amp=0.3):
    base = LatticePath.straight(L, n, x, z)
    s = np.linspace(0, 1, n + 1)[:, None]
    return LatticePath(L, base.nodes + amp * np.sin(np.pi * s) * np.array([1.0, -0.5]))


def test_gaussian_minimizer_is_straight_line():
    x, z, L = np.array([0.2, -0.1]), np.array([1.4, 0.9]), 2.0
    res = minimize_action(GAUSS, EMPTY, L, x, z, init=wiggled(L, 32, x, z))
    assert res.value.total == pytest.approx(np.sum((z - x) ** 2) / (2 * L), rel=1e-6)
    np.testing.assert_allclose(res.path.nodes, LatticePath.straight(L, 32, x, z).nodes, atol=1e-5)


def test_drift_following_minimum_is_zero():
    v = np.array([0.3, -0.2])
    f = CoefficientField(2, constant(np.eye(2)), constant(np.zeros(2)), constant(v), jump_zero(2))
    res = minimize_action(f, EMPTY, 3.0, [0, 0], 3.0 * v, init=wiggled(3.0, 48, [0, 0], 3.0 * v))
    assert res.value.total == pytest.approx(0.0, abs=1e-10)


def test_descent_is_monotone_and_below_init():
    f, nu = builtin_suite("homogenization", 2)
    init = LatticePath.straight(2.0, 32, [0, 0], [1.0, 0.5])
    res = minimize_action(f, nu, 2.0, [0, 0], [1.0, 0.5], init=init)
    hist = res.diagnostics["history"]
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert res.value.total <= hist[0]


def test_jump_tilt_is_zero_at_minimum():
    f, nu = builtin_suite("jump", 2)
    res = minimize_action(f, nu, 2.0, [0, 0], [1.0, 0.0])
    np.testing.assert_allclose(res.phi.values, 0.0, atol=1e-6)
    assert res.value.v2 == pytest.approx(0.0, abs=1e-10)


def dp_oracle_x1(L, n, x1, z1, amp, grid):
    """Exhaustive dynamic programming over a state lattice for the x_1 problem."""
    h = L / n
    c = amp * np.sin(2 * np.pi * grid)
    step = 0.5 * h * ((grid[None, :] - grid[:, None]) / h - c[:, None]) ** 2   # [from, to]
    cost = np.full(len(grid), np.inf)
    cost[np.argmin(np.abs(grid - x1))] = 0.0
    for _ in range(n - 1):
        cost = np.min(cost[:, None] + step, axis=0)
    return float(np.min(cost + step[:, np.argmin(np.abs(grid - z1))]))


def test_periodic_drift_matches_dp_oracle():
    f, nu = builtin_suite("periodic_drift", 2)
    L, n = 2.0, 16
    x, z = np.array([0.0, 0.0]), np.array([0.6, 0.4])
    res = minimize_action(f, nu, L, x, z, n_steps=n)
    grid = np.arange(-0.5, 1.1 + 1e-12, 0.0025)
    oracle = dp_oracle_x1(L, n, x[0], z[0], 0.1, grid) + (z[1] - x[1]) ** 2 / (2 * L)
    assert res.value.total == pytest.approx(oracle, rel=0.05)


def test_subadditivity():
    f, nu = builtin_suite("periodic_drift", 2)
    v = np.array([0.4, 0.2])
    L1, L2 = 2.0, 3.0
    whole = minimize_action(f, nu, L1 + L2, [0, 0], (L1 + L2) * v).value.total
    first = minimize_action(f, nu, L1, [0, 0], L1 * v).value.total
    second = minimize_action(f, nu, L2, L1 * v, (L1 + L2) * v).value.total
    assert whole <= first + second + 1e-6


def test_argmin_invariant_under_sigma_scaling():
    sig = trig(np.eye(2), 0.2 * np.eye(2), [1.0, 0.0])
    s = 2.0
    base = CoefficientField(2, sig, constant(np.zeros(2)), constant(np.zeros(2)), jump_zero(2))
    scaled = CoefficientField(2, lambda x: s * sig(x), constant(np.zeros(2)), constant(np.zeros(2)),
                              jump_zero(2))
    opts = RateOptions(tol=1e-7)
    a = minimize_action(base, EMPTY, 2.0, [0, 0], [1.3, 0.4], opts=opts, n_steps=24)
    b = minimize_action(scaled, EMPTY, 2.0, [0, 0], [1.3, 0.4], opts=opts, n_steps=24)
    assert b.value.v1 == pytest.approx(a.value.v1 / s**2, rel=1e-6)
    np.testing.assert_allclose(b.path.nodes, a.path.nodes, atol=1e-6)


def test_convergence_error_carries_best():
    f, nu = builtin_suite("homogenization", 2)
    with pytest.raises(ConvergenceError) as info:
        minimize_action(f, nu, 4.0, [0, 0], [2.0, 1.0], opts=RateOptions(max_iter=2))
    assert info.value.best is not None
    assert info.value.best.value.total <= v1_energy(f, nu, LatticePath.straight(4.0, 64, [0, 0], [2.0, 1.0]))


def test_endpoint_mismatch_rejected():
    with pytest.raises(InputError):
        minimize_action(GAUSS, EMPTY, 1.0, [0, 0], [1, 1], init=LatticePath.straight(1.0, 16, [0, 0], [2, 2]))


@pytest.mark.parametrize("v", [[0.0, 0.0], [0.5, 0.0], [-0.3, 0.4], [1.0, 1.0], [2.0, -0.5]])
def test_gaussian_rate_closed_form(v):
    est = estimate_J(GAUSS, EMPTY, v)
    assert est.J == pytest.approx(0.5 * np.dot(v, v), rel=1e-3, abs=1e-12)
    assert len(est.values) >= 3 and all(val >= 0 for _, val in est.values)


def test_constant_drift_rate_vanishes_only_at_drift():
    v0 = np.array([0.25, 0.0])
    f = CoefficientField(2, constant(np.eye(2)), constant(np.zeros(2)), constant(v0), jump_zero(2))
    assert estimate_J(f, EMPTY, v0).J == pytest.approx(0.0, abs=1e-9)
    for v in ([0.0, 0.0], [0.25, 0.1], [1.0, 0.0]):
        assert estimate_J(f, EMPTY, v).J > 1e-4


def test_schedule_validation():
    with pytest.raises(InputError):
        estimate_J(GAUSS, EMPTY, [1.0, 0.0], L_schedule=[8, 16])
    with pytest.raises(InputError):
        estimate_J(GAUSS, EMPTY, [1.0, 0.0], L_schedule=[8, 4, 16])


def test_path_space_infimum_scaling():
    assert path_space_infimum(GAUSS, EMPTY, 1.0, [0.3, 0.3], [0.3, 0.3]) == pytest.approx(0.0, abs=1e-12)
    assert path_space_infimum(GAUSS, EMPTY, 2.0, [0, 0], [2, 0]) == pytest.approx(1.0, rel=1e-3)
    one = path_space_infimum(GAUSS, EMPTY, 1.0, [0, 0], [1, 1])
    two = path_space_infimum(GAUSS, EMPTY, 2.0, [0, 0], [1, 1])
    assert two == pytest.approx(one / 2, rel=1e-3)
    assert one == pytest.approx(1.0, rel=1e-3)


def test_convexity_report_cases():
    grid = [np.array([a, b]) for a in (-0.5, 0.0, 0.5) for b in (-0.5, 0.0, 0.5)]
    ests = [RateEstimate(v, [], 0.5 * v @ v) for v in grid]
    rep = convexity_check(ests)
    assert rep.passed and rep.n_triples > 0
    assert convexity_check(ests[:1]).n_triples == 0 and convexity_check(ests[:1]).passed
    corrupted = list(ests)
    corrupted[4] = RateEstimate(grid[4], [], 1.0)    # centre of the grid
    assert not convexity_check(corrupted).passed


def test_rate_function_memoizes_and_table(tmp_path):
    J = rate_function(GAUSS, EMPTY)
    assert J([0.4, 0.0]) == J(np.array([0.4, 0.0]))
    assert len(J.cache) == 1
    est = [estimate_J(GAUSS, EMPTY, v) for v in ([0, 0], [1, 0])]
    write_rate_table(est, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("v1,v2,V_L/L@8") and lines[0].endswith(",J") and len(lines) == 3
