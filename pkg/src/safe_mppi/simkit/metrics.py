"""Trace reductions and multi-method comparison."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..reach_avoid import goal_stage_cost
from .engine import SimTrace, run_closed_loop
from .scenario import Scenario


@dataclass
class GoalMetrics:
    name: str
    first_entry_time: Optional[float]
    in_window: bool


@dataclass
class Metrics:
    goals: list = field(default_factory=list)
    min_clearance: Optional[float] = None
    min_barrier: Optional[float] = None
    terminal_distance: Optional[float] = None
    infeasible_steps: int = 0
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        row = {"min_clearance": self.min_clearance, "min_barrier": self.min_barrier,
               "terminal_distance": self.terminal_distance,
               "infeasible_steps": self.infeasible_steps, "diverged": self.diverged}
        for g in self.goals:
            row[f"{g.name}_first_entry"] = g.first_entry_time
            row[f"{g.name}_in_window"] = g.in_window
        return row


def _window_mask(times, window, dt):
    if window is None:
        return np.ones_like(times, dtype=bool)
    t1, t2 = window
    k = np.rint(times / dt)
    return (k >= np.ceil(t1 / dt - 1e-9)) & (k <= np.floor(t2 / dt + 1e-9))


def evaluate_metrics(trace: SimTrace, scenario: Scenario) -> Metrics:
    """Goal timing, clearance and barrier statistics of the true trajectory."""
    times = np.asarray(trace.time, dtype=float)
    states = np.asarray(trace.state, dtype=float)
    pi = scenario.model.position_indices
    out = Metrics(infeasible_steps=trace.infeasible_steps, diverged=trace.diverged)

    for g in scenario.goals:
        costs = np.array([goal_stage_cost(g, x, t, pi) for x, t in zip(states, times)])
        inside = costs <= 0.0
        first = float(times[np.argmax(inside)]) if inside.any() else None
        in_window = bool(np.any(inside & _window_mask(times, g.window, scenario.dt)))
        out.goals.append(GoalMetrics(g.name, first, in_window))

    if scenario.obstacles:
        p = states[:, list(pi)]
        clearance = [np.linalg.norm(p - np.asarray(o.obstacle_position), axis=1) - o.physical_radius
                     for o in scenario.obstacles]
        out.min_clearance = float(np.min(clearance))
        out.min_barrier = float(np.min(np.asarray(trace.barrier, dtype=float)))

    if scenario.goals:
        final = scenario.goals[-1]
        out.terminal_distance = float(np.linalg.norm(states[-1, list(pi)] - final.position_at(times[-1])))
    return out


def compare_runs(scenarios: Sequence[Scenario], seeds: Sequence[int], workers: Optional[int] = None) -> list:
    """Run every scenario on every seed; one metrics row per (scenario, seed)."""
    rows = []
    for sc in scenarios:
        for seed in seeds:
            trace = run_closed_loop(sc, seed=seed, workers=workers)
            rows.append({"method": sc.name, "seed": int(seed), **evaluate_metrics(trace, sc).flat()})
    return rows
