import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safe_mppi.dynamics import DiscreteDynamics, extended_unicycle, single_integrator_2d
from safe_mppi.mppi import (
    MppiConfig,
    MppiPlanner,
    NoFeasibleRollout,
    clamp,
    control_cost,
    receding_shift,
    rollout,
    sample_cost,
    sample_noise,
    samples_override,
    softmin_weights,
    solve,
    update_mean,
)
from safe_mppi.reach_avoid import AvoidTask, GoalTask, HistoryBuffer, TaskSet, trajectory_task_cost

BOUNDS = np.array([[-2.0, 2.0], [-2.0, 2.0]])
costs_strategy = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40)


def si(dt=0.1):
    return DiscreteDynamics(single_integrator_2d(), dt)


def cfg(**kw):
    base = dict(horizon=5, samples=64, temperature=1.0, noise_covariance=[0.25, 0.25], control_bounds=BOUNDS)
    base.update(kw)
    return MppiConfig(**base)


# --- config ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        cfg(horizon=0)
    with pytest.raises(ValueError):
        cfg(temperature=0.0)
    with pytest.raises(ValueError):
        cfg(noise_covariance=[[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        cfg(noise_covariance=[[1.0, 0.0], [0.0, -1.0]])


def test_default_noise_is_quarter_half_width():
    c = MppiConfig(horizon=3, samples=4, control_bounds=[[-2, 2], [-1, 1]])
    np.testing.assert_allclose(np.diag(c.noise_covariance), [0.5 ** 2, 0.25 ** 2])


def test_samples_override(monkeypatch):
    monkeypatch.delenv("SAFE_MPPI_SAMPLES_OVERRIDE", raising=False)
    assert samples_override(500) == 500
    monkeypatch.setenv("SAFE_MPPI_SAMPLES_OVERRIDE", "64")
    assert samples_override(500) == 64


# --- noise -------------------------------------------------------------------

def test_zero_covariance_gives_zero_noise():
    assert not np.any(sample_noise(cfg(noise_covariance=[0.0, 0.0]), 0))


def test_noise_variance():
    c = cfg(horizon=1, samples=100_000, noise_covariance=[0.3, 1.7])
    w = sample_noise(c, 0)
    assert w.shape == (100_000, 1, 2)
    np.testing.assert_allclose(w.reshape(-1, 2).var(axis=0), [0.3, 1.7], rtol=0.02)


def test_noise_correlation_follows_covariance():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    w = sample_noise(cfg(horizon=2, samples=50_000, noise_covariance=cov), 3).reshape(-1, 2)
    np.testing.assert_allclose(np.cov(w.T), cov, atol=0.04)


def test_noise_deterministic():
    c = cfg()
    np.testing.assert_array_equal(sample_noise(c, 4), sample_noise(c, 4))
    assert not np.array_equal(sample_noise(c, 4), sample_noise(c, 5))


# --- rollout -------------------------------------------------------------------

def test_rollout_constant_trajectory():
    states = rollout(si(), np.array([1.0, -1.0]), np.zeros((4, 2)))
    np.testing.assert_array_equal(states, np.tile([1.0, -1.0], (5, 1)))


def test_rollout_cumulative_sum():
    states = rollout(si(0.1), np.zeros(2), np.tile([1.0, 0.0], (3, 1)))
    np.testing.assert_allclose(states[:, 0], [0, 0.1, 0.2, 0.3], atol=1e-15)


def test_rollout_saturates():
    bounds = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    states = rollout(si(1.0), np.zeros(2), np.zeros((1, 2)), noise=np.array([[[2.0, 0.0]]]), bounds=bounds)
    np.testing.assert_array_equal(states[0, -1], [1.0, 0.0])


def test_rollout_batch_shares_initial_state():
    noise = np.random.default_rng(0).normal(size=(7, 6, 2))
    dyn = DiscreteDynamics(extended_unicycle(), 0.05)
    x0 = np.array([0.1, 0.2, 0.3, 0.4])
    states = rollout(dyn, x0, np.zeros((6, 2)), noise)
    assert states.shape == (7, 7, 4)
    np.testing.assert_array_equal(states[:, 0], np.tile(x0, (7, 1)))
    for k in range(7):
        np.testing.assert_array_equal(states[k], rollout(dyn, x0, noise[k]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6))
def test_clamp_idempotent(values):
    u = np.array(values).reshape(3, 2)
    once = clamp(u, BOUNDS)
    np.testing.assert_array_equal(clamp(once, BOUNDS), once)


# --- costs ---------------------------------------------------------------------

def test_control_cost_examples():
    one = MppiConfig(horizon=1, samples=1, temperature=2.0, noise_covariance=[1.0, 1.0])
    assert control_cost(np.array([[1.0, 1.0]]), one) == pytest.approx(2.0)
    assert control_cost(np.zeros((1, 2)), one) == 0.0
    doubled = MppiConfig(horizon=1, samples=1, temperature=4.0, noise_covariance=[1.0, 1.0])
    assert control_cost(np.array([[0.3, -0.7]]), doubled) == 2 * control_cost(np.array([[0.3, -0.7]]), one)


def test_sample_cost_adds_control_term():
    tasks = TaskSet([GoalTask((1, 1), 0.2)], [AvoidTask((0.5, 0.0))])
    c = cfg(horizon=3)
    states = rollout(si(), np.zeros(2), np.full((3, 2), 0.5))
    hist = HistoryBuffer(0.1)
    task = trajectory_task_cost(tasks, states, hist, 0.0)
    assert sample_cost(states, None, np.zeros((3, 2)), c, tasks, hist, 0.0) == task
    v = np.full((3, 2), 0.5)
    assert sample_cost(states, None, v, c, tasks, hist, 0.0) == pytest.approx(task + control_cost(v, c))


# --- weights --------------------------------------------------------------------

def test_softmin_examples():
    np.testing.assert_allclose(softmin_weights(np.full(4, 3.0), 1.0), np.full(4, 0.25))
    np.testing.assert_allclose(softmin_weights(np.array([0.0, math.log(3.0)]), 1.0), [0.75, 0.25], atol=1e-15)
    np.testing.assert_array_equal(softmin_weights(np.array([0.0, np.inf]), 1.0), [1.0, 0.0])
    with pytest.raises(NoFeasibleRollout):
        softmin_weights(np.array([np.inf, np.nan]), 1.0)


@settings(max_examples=200, deadline=None)
@given(costs_strategy, st.floats(1e-3, 1e3), st.floats(-1e3, 1e3, allow_nan=False))
def test_softmin_simplex_and_shift_invariance(costs, lam, shift):
    costs = np.array(costs)
    w = softmin_weights(costs, lam)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmin_weights(costs + shift, lam), w, rtol=1e-6, atol=1e-12)


def test_small_temperature_selects_argmin():
    rng = np.random.default_rng(1)
    costs = rng.uniform(0, 10, size=200)
    noise = rng.normal(size=(200, 5, 2))
    v = np.zeros((5, 2))
    new = update_mean(v, noise, softmin_weights(costs, 1e-6))
    np.testing.assert_allclose(new, noise[np.argmin(costs)], atol=1e-6)


# --- mean update ----------------------------------------------------------------

def test_update_mean_examples():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(4, 2)) * 0.1
    noise = rng.normal(size=(3, 4, 2)) * 0.1
    np.testing.assert_allclose(update_mean(v, noise, [0, 1.0, 0]), v + noise[1], atol=1e-15)
    sym = np.stack([noise[0], -noise[0]])
    np.testing.assert_allclose(update_mean(v, sym, [0.5, 0.5]), v, atol=1e-15)


def test_update_mean_uniform_shift_vanishes():
    c = cfg(horizon=4, samples=40_000, noise_covariance=[1.0, 1.0])
    noise = sample_noise(c, 0)
    shift = update_mean(np.zeros((4, 2)), noise, np.full(c.samples, 1.0 / c.samples), bounds=None)
    assert np.all(np.abs(shift) < 3.0 / math.sqrt(c.samples))


def test_update_mean_is_clamped():
    new = update_mean(np.full((2, 2), 1.9), np.ones((1, 2, 2)), [1.0], BOUNDS)
    np.testing.assert_array_equal(new, np.full((2, 2), 2.0))


def test_receding_shift():
    np.testing.assert_array_equal(receding_shift(np.array([[1.0], [2.0], [3.0]])), [[2.0], [3.0], [3.0]])
    np.testing.assert_array_equal(receding_shift(np.ones((4, 2))), np.ones((4, 2)))
    np.testing.assert_array_equal(receding_shift(np.array([[5.0, 6.0]])), [[5.0, 6.0]])


# --- solve ------------------------------------------------------------------------

def goal_tasks():
    return TaskSet([GoalTask((1.5, 1.0), 0.2)], [AvoidTask((0.7, 0.5), gain=0.5)])


def test_single_sample_takes_its_noise():
    c = cfg(samples=1, temperature=123.0)
    warm = np.full((5, 2), 0.1)
    sol = solve(c, si(), np.zeros(2), goal_tasks(), HistoryBuffer(0.1), 0.0, warm)
    np.testing.assert_allclose(sol.mean, clamp(warm + sample_noise(c, 0)[0], BOUNDS), atol=1e-15)
    np.testing.assert_array_equal(sol.weights, [1.0])


def test_zero_noise_keeps_warm_start():
    c = cfg(noise_covariance=[0.0, 0.0])
    warm = np.full((5, 2), 0.3)
    sol = solve(c, si(), np.zeros(2), goal_tasks(), HistoryBuffer(0.1), 0.0, warm)
    np.testing.assert_array_equal(sol.mean, warm)
    np.testing.assert_array_equal(sol.nominal_trajectory, rollout(si(), np.zeros(2), warm, bounds=BOUNDS))


def test_solution_invariants():
    c = cfg(samples=200)
    dyn = si()
    x0 = np.array([0.2, -0.1])
    sol = solve(c, dyn, x0, goal_tasks(), HistoryBuffer(0.1), 0.0, np.zeros((5, 2)), keep_samples=True)
    assert abs(sol.weights.sum() - 1.0) <= 1e-12 and np.all(sol.weights >= 0)
    np.testing.assert_array_equal(sol.nominal_trajectory[0], x0)
    np.testing.assert_array_equal(rollout(dyn, x0, sol.mean, bounds=BOUNDS), sol.nominal_trajectory)
    assert sol.sampled_states.shape == (200, 6, 2)


def test_infinite_cost_samples_masked():
    dyn = DiscreteDynamics(single_integrator_2d(speed_bound=1e300), 1e10)
    c = MppiConfig(horizon=2, samples=32, noise_covariance=[1e300, 1e300], control_bounds=[[-1e300, 1e300]] * 2)
    with pytest.raises(NoFeasibleRollout):
        solve(c, dyn, np.zeros(2), goal_tasks(), HistoryBuffer(1e10), 0.0, np.zeros((2, 2)))


def test_worker_count_does_not_change_solution():
    c1 = cfg(samples=257, workers=1)
    c8 = cfg(samples=257, workers=8)
    dyn = DiscreteDynamics(extended_unicycle(), 0.05)
    tasks = TaskSet([GoalTask((2, 2), 0.3, window=(0.0, 3.0))], [AvoidTask((1, 1), gain=2.0)])
    hist = HistoryBuffer(0.05)
    x0 = np.array([0.0, 0.0, 0.5, 0.2])
    a = solve(c1, dyn, x0, tasks, hist, 0.0, np.zeros((5, 2)), iteration=3)
    b = solve(c8, dyn, x0, tasks, hist, 0.0, np.zeros((5, 2)), iteration=3)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.costs, b.costs)


def test_update_improves_cost_in_reach_avoid_setting():
    tasks = TaskSet([GoalTask((2.0, 2.0), 0.4, gain=10.0)], [])
    dyn = DiscreteDynamics(single_integrator_2d(), 0.05)
    hist = HistoryBuffer(0.05)
    warm = np.zeros((50, 2))
    base = MppiConfig(horizon=50, samples=10_000, temperature=1.0, noise_covariance=[1.0, 1.0],
                      control_bounds=dyn.base.input_bounds)
    warm_cost = float(sample_cost(rollout(dyn, np.zeros(2), warm), warm, warm, base, tasks, hist, 0.0))
    better = 0
    for trial in range(100):
        sol = solve(base, dyn, np.zeros(2), tasks, hist, 0.0, warm, iteration=trial)
        better += sol.mean_cost < warm_cost
    assert better >= 95


def test_planner_warm_starts_from_shifted_mean():
    c = cfg(samples=50)
    planner = MppiPlanner(c, si(), goal_tasks())
    first = planner.plan(np.zeros(2), HistoryBuffer(0.1), 0.0)
    np.testing.assert_array_equal(planner.mean, receding_shift(first.mean))
    assert planner.cycle == 1
