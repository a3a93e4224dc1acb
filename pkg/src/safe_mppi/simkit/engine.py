"""Closed-loop simulation: sensor -> estimator -> planner -> filter -> plant."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import rng as rngmod
from ..cbf_filter import filter as cbf_filter
from ..dynamics import NumericalBlowUp, disturbed_step, step_euler, step_euler_maruyama
from ..estimation import Estimator, GaussianBelief, sense
from ..mppi import MppiPlanner, NoFeasibleRollout
from ..qp import FilterInfeasible
from ..reach_avoid import HistoryBuffer, goal_stage_cost, obstacle_stage_cost
from .scenario import Scenario

log = logging.getLogger(__name__)


@dataclass
class SimTrace:
    """Per-step record of one closed-loop run. Row ``k`` is global time ``k * dt``.

    Controls on the final row are NaN: the run ends at the final state.
    """

    n: int
    m: int
    time: list = field(default_factory=list)
    state: list = field(default_factory=list)
    estimate: list = field(default_factory=list)
    measurement: list = field(default_factory=list)
    u_nom: list = field(default_factory=list)
    u: list = field(default_factory=list)
    barrier: list = field(default_factory=list)
    stage_costs: list = field(default_factory=list)
    mppi_cost: list = field(default_factory=list)
    events: list = field(default_factory=list)
    diverged: bool = False
    barrier_names: list = field(default_factory=list)
    task_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.time)

    def array(self, channel: str) -> np.ndarray:
        return np.array(getattr(self, channel), dtype=float)

    @property
    def infeasible_steps(self) -> int:
        return sum(1 for ev in self.events if any(e.startswith("filter_infeasible") for e in ev))


def physical_barriers(scenario: Scenario, x) -> list:
    """h = |p - c|^2 - r^2 for every obstacle at its physical radius."""
    p = scenario.model.position(x)
    return [float(np.sum((p - np.asarray(o.obstacle_position)) ** 2) - o.physical_radius ** 2)
            for o in scenario.obstacles]


def _stage_costs(scenario: Scenario, x, t) -> list:
    pi = scenario.model.position_indices
    out = [float(goal_stage_cost(g, x, t, pi)) for g in scenario.goals]
    out += [float(obstacle_stage_cost(o, x, pi)) for o in scenario.obstacles]
    return out


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def proportional_to_goal(scenario: Scenario, x, goal_xy) -> np.ndarray:
    """Drive straight at ``goal_xy``; velocity command for the single integrator,
    speed/heading tracking for the extended unicycle."""
    spec = scenario.nominal_controller
    model = scenario.model
    if scenario.model_id == "single_integrator_2d":
        u = float(spec.get("gain", 1.0)) * (np.asarray(goal_xy) - x[:2])
        return model.clamp(u)
    px, py, theta, v = x
    dx, dy = goal_xy[0] - px, goal_xy[1] - py
    dist = np.hypot(dx, dy)
    heading_err = _wrap(np.arctan2(dy, dx) - theta)
    v_des = min(float(spec.get("max_speed", 1.5)), float(spec.get("gain", 1.0)) * dist) * max(np.cos(heading_err), 0.0)
    a = float(spec.get("speed_gain", 2.0)) * (v_des - v)
    omega = float(spec.get("heading_gain", 3.0)) * heading_err
    return model.clamp(np.array([a, omega]))


def _active_goal(scenario: Scenario, history_positions, t):
    """First goal not yet entered (by the estimate history); the last goal once all are reached."""
    for g in scenario.goals:
        c = g.position_at(t)
        if not history_positions or min(np.sum((p - c) ** 2) for p in history_positions) > g.radius ** 2:
            return c
    return scenario.goals[-1].position_at(t)


def run_closed_loop(scenario: Scenario, seed: Optional[int] = None, workers: Optional[int] = None,
                    rollout_sink: Optional[Callable] = None) -> SimTrace:
    """Simulate ``scenario`` for its duration.

    ``seed`` overrides the scenario seed; it keys the plant, sensor and
    planner noise streams. ``rollout_sink(cycle, time, solution)`` receives
    every MPPI solution with its sampled trajectories when given.
    """
    seed = scenario.seed if seed is None else int(seed)
    model = scenario.model
    n, m = model.n, model.m
    dt = scenario.dt
    plant = scenario.plant_dynamics()
    filter_model = scenario.filter_model()
    barriers = scenario.barriers() if scenario.filter["variant"] != "none" else []
    alpha = scenario.class_k()

    planner = None
    if scenario.planner is not None:
        cfg = scenario.planner
        cfg = dataclasses.replace(cfg, seed=seed * 1000003 + cfg.seed,
                                  workers=workers if workers is not None else cfg.workers)
        planner = MppiPlanner(cfg, scenario.planner_dynamics(), scenario.tasks)

    estimator = Estimator(scenario.estimator, plant, scenario.sensor,
                          GaussianBelief(scenario.initial_state, scenario.initial_covariance))
    history = HistoryBuffer(dt, 0.0)
    trace = SimTrace(n, m, barrier_names=[o.name for o in scenario.obstacles],
                     task_names=[g.name for g in scenario.goals] + [o.name for o in scenario.obstacles])
    nan_u = np.full(m, np.nan)
    x = scenario.initial_state.copy()
    steps = scenario.steps

    for k in range(steps + 1):
        t = k * dt
        events = []
        y = sense(scenario.sensor, x, rngmod.stream(seed, rngmod.SENSOR, k))
        xhat = estimator.update(y)

        trace.time.append(t)
        trace.state.append(x.copy())
        trace.estimate.append(np.array(xhat, dtype=float))
        trace.measurement.append(np.array(y, dtype=float))
        trace.barrier.append(physical_barriers(scenario, x))
        trace.stage_costs.append(_stage_costs(scenario, x, t))

        if k == steps:
            trace.u_nom.append(nan_u)
            trace.u.append(nan_u)
            trace.mppi_cost.append(np.nan)
            trace.events.append(events)
            break

        mppi_cost = np.nan
        u_plan = np.zeros(m)
        if planner is not None:
            try:
                sol = planner.plan(xhat, history, t, keep_samples=rollout_sink is not None)
                u_plan = sol.mean[0].copy()
                mppi_cost = sol.mean_cost
                if rollout_sink is not None:
                    rollout_sink(k, t, sol)
            except NoFeasibleRollout as exc:
                events.append(f"no_feasible_rollout: {exc}")

        kind = scenario.nominal_controller["type"]
        if kind == "mppi_first_control":
            u_nom = u_plan
        elif kind == "proportional_to_goal":
            positions = [model.position(s) for s in history.states] + [model.position(xhat)]
            u_nom = proportional_to_goal(scenario, xhat, _active_goal(scenario, positions, t))
        else:
            u_nom = np.zeros(m)

        variant = scenario.filter["variant"]
        if variant == "none":
            u = u_nom.copy()
        else:
            try:
                u = cbf_filter(u_nom, xhat, barriers, filter_model, variant, alpha)
            except FilterInfeasible as exc:
                events.append(f"filter_infeasible: {exc}")
                u = np.zeros(m)

        trace.u_nom.append(np.array(u_nom, dtype=float))
        trace.u.append(np.array(u, dtype=float))
        trace.mppi_cost.append(mppi_cost)
        trace.events.append(events)
        history.append(xhat)

        try:
            if scenario.plant_noise > 0:
                x = step_euler_maruyama(plant, x, u, rngmod.stream(seed, rngmod.PLANT, k))
            elif scenario.disturbance is not None:
                gen = rngmod.stream(seed, rngmod.PLANT, k)
                bound = scenario.disturbance["bound"]
                x = disturbed_step(plant, x, u, gen.uniform(-bound, bound))
            else:
                x = step_euler(plant, x, u)
        except NumericalBlowUp as exc:
            events.append(f"diverged: {exc}")
            trace.diverged = True
            log.warning("run diverged at t=%.3f", t)
            break
        estimator.predict(u)

    return trace
