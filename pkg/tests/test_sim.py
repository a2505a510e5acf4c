import io
import json

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from ldpms.coeffs import (CoefficientField, LevyMeasure, ScaleRegime, builtin_suite, constant,
                          jump_linear, jump_zero, trig)
from ldpms.errors import ConfigError, SimulationError
from ldpms.measure_change import Tilt
from ldpms.sim import SimConfig, dump_summary, simulate, simulate_batch, terminal_batch


def deterministic_field(dim, c):
    return CoefficientField(dim, constant(np.zeros((dim, dim))), constant(np.zeros(dim)), c,
                            jump_zero(dim))


def test_zero_dynamics_constant_state():
    f = deterministic_field(2, constant(np.zeros(2)))
    traj = simulate(f, LevyMeasure.empty(2), SimConfig(1.0, 0.01, [0.3, -0.2], ScaleRegime(0.1, 0.3)))
    assert np.all(traj.states == np.array([0.3, -0.2]))
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0


def test_pure_drift_is_exact():
    v = np.array([0.7, -1.3])
    f = deterministic_field(2, constant(v))
    cfg = SimConfig(2.0, 0.01, [1.0, 2.0], ScaleRegime(0.1, 0.3))
    traj = simulate(f, LevyMeasure.empty(2), cfg)
    np.testing.assert_allclose(traj.states, cfg.x0 + traj.times[:, None] * v, rtol=0, atol=1e-12)


def test_euler_converges_to_rk_oracle_at_first_order():
    c = trig(np.zeros(2), np.array([1.0, 0.0]), [1.0, 0.0])
    f = deterministic_field(2, c)
    x0 = np.array([0.1, 0.0])
    T = 1.0
    oracle = solve_ivp(lambda t, x: [np.sin(2 * np.pi * x[0]), 0.0], (0, T), x0,
                       method="DOP853", rtol=1e-12, atol=1e-12, dense_output=True)
    errors = []
    for dt in (0.02, 0.01, 0.005):
        traj = simulate(f, LevyMeasure.empty(2), SimConfig(T, dt, x0, ScaleRegime(1e-8, 1.0)))
        ref = oracle.sol(traj.times).T
        errors.append(np.max(np.abs(traj.states - ref)))
    for dt, err in zip((0.02, 0.01, 0.005), errors):
        assert err <= 2.0 * dt
    assert errors[0] / errors[1] == pytest.approx(2.0, rel=0.15)
    assert errors[1] / errors[2] == pytest.approx(2.0, rel=0.15)


def jump_model(mass=1.0):
    f = CoefficientField(2, constant(np.eye(2)), constant(np.zeros(2)), constant(np.zeros(2)),
                         jump_linear())
    return f, LevyMeasure.from_atoms([([0.5, 0.0], mass)], 2)


def test_poisson_mean_count():
    f, nu = jump_model(mass=1.5)
    eps = 0.1
    batch = simulate_batch(f, nu, SimConfig(1.0, 0.01, [0.0, 0.0], ScaleRegime(eps, eps**0.5), seed=11),
                           10_000)
    counts = np.array([len(t.jump_log) for t, _ in batch])
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - 1.5 / eps) <= 3 * se


def test_jump_log_records_increments_and_times():
    f, nu = jump_model()
    eps = 0.2
    cfg = SimConfig(1.0, 0.01, [0.0, 0.0], ScaleRegime(eps, 0.5), seed=2)
    traj = simulate(f, nu, cfg)
    assert traj.jump_log
    for t, mark, inc in traj.jump_log:
        assert 0.0 <= t <= cfg.T
        np.testing.assert_allclose(inc, eps * mark)
    assert len(traj.jump_log) == int(traj.jump_counts.sum())


def test_compensated_jump_part_has_zero_mean():
    f, nu = jump_model(mass=2.0)
    eps, T = 0.1, 1.0
    cfg = SimConfig(T, 0.01, [0.0, 0.0], ScaleRegime(eps, eps**0.5), seed=5)
    batch = simulate_batch(f, nu, cfg, 10_000)
    mark = nu.marks[0]
    incr = np.array([eps * t.jump_counts.sum() * mark[0] - nu.masses[0] * mark[0] * T for t, _ in batch])
    se = incr.std(ddof=1) / np.sqrt(len(incr))
    assert abs(incr.mean()) <= 3 * se


def test_weak_error_decreases_under_refinement():
    f = CoefficientField(1, constant(np.eye(1)), constant(np.zeros(1)), trig([0.0], [1.0], [1.0]),
                         jump_zero(1))
    means = []
    for dt in (0.2, 0.1, 0.05, 0.025):
        fin, _ = terminal_batch(f, LevyMeasure.empty(1), SimConfig(1.0, dt, [0.1], ScaleRegime(0.1, 1.0), seed=3),
                                20_000)
        means.append(np.mean(np.cos(2 * np.pi * fin[:, 0])))
    diffs = np.abs(np.diff(means))
    assert diffs[0] > diffs[1] > diffs[2]


def test_batch_identical_across_threads():
    f, nu = builtin_suite("homogenization", 2)
    cfg = SimConfig(1.0, 0.01, [0.0, 0.0], ScaleRegime(0.1, 0.1**0.5), seed=9)
    one = simulate_batch(f, nu, cfg, 3000, threads=1)
    many = simulate_batch(f, nu, cfg, 3000, threads=4)
    for (a, _), (b, _) in zip(one, many):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.jump_counts, b.jump_counts)
    assert one[0][0].to_csv() == simulate(f, nu, cfg).to_csv()


def test_weights_zero_without_tilt_and_with_neutral_tilt():
    f, nu = builtin_suite("jump", 2)
    cfg = SimConfig(1.0, 0.01, [0.0, 0.0], ScaleRegime(0.2, 0.2**0.5), seed=4)
    plain = simulate_batch(f, nu, cfg, 50)
    assert all(w == 0.0 for _, w in plain)
    neutral = simulate_batch(f, nu, cfg, 50, tilt=Tilt.zero(1.0, cfg.n_steps, 2, nu.n_atoms))
    assert all(w == 0.0 for _, w in neutral)
    for (a, _), (b, _) in zip(plain, neutral):
        np.testing.assert_array_equal(a.states, b.states)


def test_constant_tilt_weights_average_to_one():
    f, nu = builtin_suite("gaussian", 2)
    cfg = SimConfig(1.0, 0.01, [0.0, 0.0], ScaleRegime(0.1, 0.1**0.5), seed=21)
    tilt = Tilt.constant_drift(1.0, cfg.n_steps, [0.4, -0.3])
    _, logw = terminal_batch(f, nu, cfg, 10_000, tilt)
    w = np.exp(logw)
    assert abs(w.mean() - 1.0) <= 3 * w.std(ddof=1) / np.sqrt(len(w))


def test_tilted_mean_follows_shifted_drift():
    f, nu = builtin_suite("gaussian", 1)
    cfg = SimConfig(1.0, 0.01, [0.0], ScaleRegime(0.1, 0.1**0.5), seed=1)
    fin, _ = terminal_batch(f, nu, cfg, 5000, Tilt.constant_drift(1.0, cfg.n_steps, [0.8]))
    assert fin[:, 0].mean() == pytest.approx(0.8, abs=4 * np.sqrt(0.1 / 5000))


def test_jump_budget_and_blow_up():
    f, nu = jump_model(mass=10.0)
    with pytest.raises(ConfigError):
        simulate(f, nu, SimConfig(1.0, 0.5, [0.0, 0.0], ScaleRegime(0.01, 0.1)))
    g = deterministic_field(1, constant([1e308]))
    with pytest.raises(SimulationError) as info:
        simulate(g, LevyMeasure.empty(1), SimConfig(1.0, 0.1, [1e308], ScaleRegime(0.1, 0.3)))
    assert info.value.step is not None


def test_config_validation():
    reg = ScaleRegime(0.1, 0.3)
    with pytest.raises(ConfigError):
        SimConfig(1.0, 2.0, [0.0], reg)
    with pytest.raises(ConfigError):
        SimConfig(1.0, -0.1, [0.0], reg)
    assert SimConfig.default(2.0, [0.0], reg).n_steps == 1000


def test_exports(tmp_path):
    f, nu = builtin_suite("jump", 2)
    cfg = SimConfig(0.5, 0.05, [0.0, 0.0], ScaleRegime(0.2, 0.2**0.5), seed=8)
    batch = simulate_batch(f, nu, cfg, 5)
    text = batch[0][0].to_csv(tmp_path / "p.csv")
    lines = text.strip().split("\n")
    assert lines[0] == "time,x1,x2,jumps"
    assert len(lines) == cfg.n_steps + 2
    assert int(lines[-1].split(",")[-1]) == batch[0][0].jump_counts.sum()
    dump_summary(batch, tmp_path / "s.json")
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["n_paths"] == 5 and summary["weights"]["mean"] == 1.0
