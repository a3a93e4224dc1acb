"""Timed reach-avoid costs over predicted and past trajectories.

All trajectory functionals accept a single rollout of shape ``(H+1, n)`` or a
batch of shape ``(K, H+1, n)`` and return a scalar or a length-``K`` array.
Row ``0`` of a rollout is the state at the current time ``now``; the history
buffer holds the states strictly before ``now``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

PAPER_LITERAL = "paper_literal"
PENALTY_SUM = "penalty_sum"
COMBINATIONS = (PAPER_LITERAL, PENALTY_SUM)

_SNAP_TOL = 1e-9


class WindowUnreachable(ValueError):
    """The window holds no sample in the history or the planning horizon."""


@dataclass(frozen=True)
class GoalTask:
    goal_position: Union[Sequence[float], Callable[[float], Sequence[float]]]
    radius: float
    gain: float = 1.0
    window: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("goal radius must be positive")
        if not self.gain > 0:
            raise ValueError("goal gain must be positive")
        if self.window is not None:
            t1, t2 = self.window
            if not t1 < t2:
                raise ValueError(f"goal window must satisfy t1 < t2, got {self.window}")
            object.__setattr__(self, "window", (float(t1), float(t2)))
        if not callable(self.goal_position):
            object.__setattr__(self, "goal_position",
                               tuple(float(v) for v in self.goal_position))

    def position_at(self, t):
        if callable(self.goal_position):
            return np.asarray(self.goal_position(t), dtype=float)
        return np.asarray(self.goal_position)

    @property
    def timed(self) -> bool:
        return self.window is not None


@dataclass(frozen=True)
class AvoidTask:
    obstacle_position: tuple
    physical_radius: float = 0.0
    gain: float = 1.0
    epsilon: float = 0.01
    name: str = ""

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("obstacle gain must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.physical_radius < 0:
            raise ValueError("physical radius must be nonnegative")
        object.__setattr__(self, "obstacle_position",
                           tuple(float(v) for v in self.obstacle_position))


@dataclass(frozen=True)
class TaskSet:
    goals: tuple = ()
    avoids: tuple = ()
    combination: str = PENALTY_SUM
    position_indices: tuple = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "goals", tuple(self.goals))
        object.__setattr__(self, "avoids", tuple(self.avoids))
        if not self.goals and not self.avoids:
            raise ValueError("a task set needs at least one goal or avoid task")
        if self.combination not in COMBINATIONS:
            raise ValueError(f"combination must be one of {COMBINATIONS}")

    @property
    def time_invariant(self) -> bool:
        return not any(g.timed for g in self.goals)


@dataclass
class HistoryBuffer:
    """Append-only record of past states on the global time grid."""

    dt: float
    start_time: float = 0.0
    states: list = field(default_factory=list)

    def append(self, x) -> None:
        self.states.append(np.array(x, dtype=float, copy=True))

    def __len__(self):
        return len(self.states)

    def time_of(self, k: int) -> float:
        return self.start_time + k * self.dt

    def as_array(self, n: Optional[int] = None) -> np.ndarray:
        if not self.states:
            return np.zeros((0, n if n is not None else 0))
        return np.stack(self.states)

    def snapshot(self) -> "HistoryBuffer":
        return HistoryBuffer(self.dt, self.start_time, list(self.states))


@dataclass(frozen=True)
class WindowIndices:
    history: np.ndarray
    prediction: np.ndarray


def _positions(x, position_indices):
    x = np.asarray(x, dtype=float)
    return x[..., list(position_indices)]


def goal_stage_cost(task: GoalTask, x, t: float = 0.0, position_indices=(0, 1)):
    """k_g (|p - p_g|^2 - r_g^2); negative strictly inside the goal disk."""
    d = _positions(x, position_indices) - task.position_at(t)
    return task.gain * (np.sum(d * d, axis=-1) - task.radius ** 2)


def obstacle_stage_cost(task: AvoidTask, x, position_indices=(0, 1)):
    """k_o / max(|p - p_o|, eps)."""
    d = _positions(x, position_indices) - np.asarray(task.obstacle_position)
    dist = np.sqrt(np.sum(d * d, axis=-1))
    return task.gain / np.maximum(dist, task.epsilon)


def _grid_index(t, start, dt, rounding):
    k = (t - start) / dt
    if rounding == "up":
        return int(math.ceil(k - _SNAP_TOL))
    if rounding == "down":
        return int(math.floor(k + _SNAP_TOL))
    return int(round(k))


def window_to_indices(window, now: float, history: HistoryBuffer, horizon: int,
                      dt: Optional[float] = None) -> WindowIndices:
    """Split the grid samples of ``window`` into history indices and rollout offsets.

    Window endpoints snap inward to the grid. Samples before ``now`` come from
    the history, samples in ``[now, now + horizon*dt]`` from the rollout, and
    samples past the horizon are dropped.
    """
    t1, t2 = window
    if not t1 < t2:
        raise ValueError("window must satisfy t1 < t2")
    dt = history.dt if dt is None else dt
    start = history.start_time
    k1 = max(_grid_index(t1, start, dt, "up"), 0)
    k2 = _grid_index(t2, start, dt, "down")
    k_now = _grid_index(now, start, dt, "nearest")

    hist = np.arange(k1, min(k2 + 1, k_now, len(history)))
    first = max(k1, k_now)
    last = min(k2, k_now + horizon)
    pred = np.arange(first - k_now, last - k_now + 1) if last >= first else np.arange(0)
    if hist.size == 0 and pred.size == 0:
        raise WindowUnreachable(f"window {window} has no samples at now={now}")
    return WindowIndices(hist, pred)


def goal_window_cost(task: GoalTask, rollout, history: HistoryBuffer, now: float,
                     position_indices=(0, 1)):
    """Minimum goal stage cost over the window, mixing past and predicted samples.

    A goal already reached inside its window (some past cost <= 0) is latched:
    its historical minimum is returned for every candidate rollout. A window
    lying entirely beyond the horizon scores the last rollout sample instead.
    """
    rollout = np.asarray(rollout, dtype=float)
    horizon = rollout.shape[-2] - 1
    batch = rollout.shape[:-2]
    dt = history.dt

    def stage(x, k_offset):
        return goal_stage_cost(task, x, now + k_offset * dt, position_indices)

    try:
        idx = window_to_indices(task.window, now, history, horizon, dt)
    except WindowUnreachable:
        return stage(rollout[..., -1, :], horizon)

    past_min = np.inf
    if idx.history.size:
        past = history.as_array()[idx.history]
        costs = np.array([goal_stage_cost(task, past[j], history.time_of(k), position_indices)
                          for j, k in enumerate(idx.history)])
        past_min = float(costs.min())
        if past_min <= 0.0:
            return np.full(batch, past_min) if batch else past_min

    if idx.prediction.size == 0:
        return np.full(batch, past_min) if batch else past_min

    if callable(task.goal_position):
        future = np.stack([stage(rollout[..., j, :], j) for j in idx.prediction], axis=-1)
    else:
        future = goal_stage_cost(task, rollout[..., idx.prediction, :], now, position_indices)
    out = np.minimum(future.min(axis=-1), past_min)
    return out if batch else float(out)


def avoid_window_cost(task: AvoidTask, rollout, history: HistoryBuffer, now: float,
                      combination: str = PENALTY_SUM, position_indices=(0, 1)):
    """Worst-case obstacle cost along the trajectory.

    ``penalty_sum``: ``+max`` of the stage cost over the rollout.
    ``paper_literal``: ``-max`` over history and rollout together.
    """
    rollout = np.asarray(rollout, dtype=float)
    worst = obstacle_stage_cost(task, rollout, position_indices).max(axis=-1)
    if combination == PENALTY_SUM:
        return worst
    if len(history):
        past = obstacle_stage_cost(task, history.as_array(), position_indices).max()
        worst = np.maximum(worst, past)
    return -worst


def trajectory_task_cost(tasks: TaskSet, rollout, history: HistoryBuffer, now: float):
    """Total task cost of one rollout or a batch of rollouts."""
    rollout = np.asarray(rollout, dtype=float)
    pi = tasks.position_indices
    dt = history.dt

    def summed_goal(g):
        if callable(g.goal_position):
            h = rollout.shape[-2]
            return sum(goal_stage_cost(g, rollout[..., j, :], now + j * dt, pi) for j in range(h))
        return goal_stage_cost(g, rollout, now, pi).sum(axis=-1)

    if tasks.time_invariant:
        total = 0.0
        for g in tasks.goals:
            total = total + summed_goal(g)
        for o in tasks.avoids:
            total = total + obstacle_stage_cost(o, rollout, pi).sum(axis=-1)
        return total

    goal_terms = [goal_window_cost(g, rollout, history, now, pi) if g.timed else summed_goal(g)
                  for g in tasks.goals]
    avoid_terms = [avoid_window_cost(o, rollout, history, now, tasks.combination, pi)
                   for o in tasks.avoids]
    terms = goal_terms + avoid_terms
    if tasks.combination == PAPER_LITERAL:
        out = terms[0]
        for term in terms[1:]:
            out = np.minimum(out, term)
        return out
    total = 0.0
    for term in terms:
        total = total + term
    return total
