"""Model Predictive Path Integral planner.

One call to :func:`solve` is one sampling iteration: draw ``K`` Gaussian
perturbations of the mean control sequence, roll them out through the nominal
discrete dynamics, score each rollout, and move the mean by the softmin-
weighted average of the perturbations.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .dynamics import DiscreteDynamics
from .reach_avoid import HistoryBuffer, TaskSet, trajectory_task_cost

SAMPLES_OVERRIDE_ENV = "SAFE_MPPI_SAMPLES_OVERRIDE"


class NoFeasibleRollout(RuntimeError):
    """Every sampled rollout had infinite or undefined cost."""


@dataclass
class MppiConfig:
    horizon: int
    samples: int
    temperature: float = 1.0
    noise_covariance: np.ndarray = None  # (m,) diagonal or (m, m)
    control_bounds: np.ndarray = None  # (m, 2)
    seed: int = 0
    iterations: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValueError("horizon and samples must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.noise_covariance is None:
            if self.control_bounds is None:
                raise ValueError("need noise_covariance or control_bounds to derive a default")
            self.noise_covariance = default_noise_std(self.control_bounds) ** 2
        cov = np.asarray(self.noise_covariance, dtype=float)
        if cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise ValueError("noise covariance must be square and symmetric")
        if np.any(np.linalg.eigvalsh(cov) < -1e-12):
            raise ValueError("noise covariance must be positive semidefinite")
        self.noise_covariance = cov
        if self.control_bounds is not None:
            self.control_bounds = np.asarray(self.control_bounds, dtype=float).reshape(-1, 2)

    @property
    def m(self) -> int:
        return self.noise_covariance.shape[0]

    @property
    def noise_factor(self) -> np.ndarray:
        """Square-root factor L with L L^T = Sigma_w (zero blocks allowed)."""
        cov = self.noise_covariance
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(cov)
            return V * np.sqrt(np.clip(w, 0.0, None))

    @property
    def noise_precision(self) -> np.ndarray:
        return np.linalg.pinv(self.noise_covariance)


def default_noise_std(bounds) -> np.ndarray:
    """A quarter of each channel's bound half-width."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    return 0.25 * 0.5 * (bounds[:, 1] - bounds[:, 0])


def samples_override(default: int) -> int:
    value = os.environ.get(SAMPLES_OVERRIDE_ENV)
    return int(value) if value else default


@dataclass
class MppiSolution:
    mean: np.ndarray  # (H, m)
    weights: np.ndarray  # (K,)
    nominal_trajectory: np.ndarray  # (H+1, n)
    costs: np.ndarray  # (K,)
    mean_cost: float
    sampled_states: Optional[np.ndarray] = field(default=None, repr=False)


def clamp(u, bounds):
    if bounds is None:
        return u
    return np.clip(u, bounds[:, 0], bounds[:, 1])


def sample_noise(cfg: MppiConfig, iteration: int) -> np.ndarray:
    """i.i.d. N(0, Sigma_w) perturbations of shape (K, H, m) for one iteration."""
    gen = rngmod.stream(cfg.seed, rngmod.MPPI, iteration)
    z = gen.standard_normal((cfg.samples, cfg.horizon, cfg.m))
    return z @ cfg.noise_factor.T


def rollout(dyn: DiscreteDynamics, x0, v, noise=None, bounds=None) -> np.ndarray:
    """Simulate the nominal discrete map under ``clamp(v + noise)``.

    Works on a single sequence ``v`` of shape (H, m) or a batch of noises of
    shape (K, H, m); the result is (H+1, n) or (K, H+1, n).
    """
    v = np.asarray(v, dtype=float)
    u = v if noise is None else v + np.asarray(noise, dtype=float)
    bounds = dyn.base.input_bounds if bounds is None else bounds
    u = dyn.base.clamp(clamp(u, bounds))
    nominal = dyn.nominal()
    x0 = np.asarray(x0, dtype=float)
    batch = u.shape[:-2]
    H = u.shape[-2]
    states = np.empty(batch + (H + 1, x0.shape[-1]))
    states[..., 0, :] = x0
    x = np.broadcast_to(x0, batch + x0.shape).copy()
    with np.errstate(all="ignore"):
        for t in range(H):
            x = nominal.mean_map(x, u[..., t, :], clamp=False)
            states[..., t + 1, :] = x
    return states


def control_cost(v, cfg: MppiConfig) -> float:
    """sum_t (lambda / 2) v_t^T Sigma_w^{-1} v_t for the mean sequence."""
    v = np.asarray(v, dtype=float)
    quad = np.einsum("ti,ij,tj->", v, cfg.noise_precision, v)
    return 0.5 * cfg.temperature * float(quad)


def sample_cost(states, perturbed_controls, mean_controls, cfg: MppiConfig,
                tasks: TaskSet, history: HistoryBuffer, now: float):
    """Task cost of the rollout(s) plus the control penalty on the mean sequence.

    ``perturbed_controls`` is accepted for interface symmetry; the penalty is
    evaluated on the mean.
    """
    task = trajectory_task_cost(tasks, states, history, now)
    return task + control_cost(mean_controls, cfg)


def softmin_weights(costs, temperature: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not finite.any():
        raise NoFeasibleRollout("all sampled rollouts have infinite cost")
    baseline = costs[finite].min()
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - baseline) / temperature)
    return w / w.sum()


def update_mean(v, noises, weights, bounds=None) -> np.ndarray:
    shift = np.tensordot(np.asarray(weights, dtype=float), np.asarray(noises, dtype=float), axes=(0, 0))
    return clamp(np.asarray(v, dtype=float) + shift, bounds)


def receding_shift(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] <= 1:
        return v.copy()
    return np.concatenate([v[1:], v[-1:]], axis=0)


def _score_chunk(dyn, x0, v, noise, bounds, tasks, history, now):
    states = rollout(dyn, x0, v, noise, bounds)
    with np.errstate(all="ignore"):
        costs = np.asarray(trajectory_task_cost(tasks, states, history, now), dtype=float)
    bad = ~np.isfinite(costs) | ~np.isfinite(states).all(axis=(-1, -2))
    costs = np.where(bad, np.inf, costs)
    return states, costs


def solve(cfg: MppiConfig, dyn: DiscreteDynamics, x0, tasks: TaskSet,
          history: HistoryBuffer, now: float, warm_start, iteration: int = 0,
          keep_samples: bool = False) -> MppiSolution:
    """Run ``cfg.iterations`` MPPI updates from ``warm_start``.

    ``iteration`` indexes the noise stream; iteration ``i`` of this call uses
    stream ``iteration * cfg.iterations + i``.
    """
    v = np.asarray(warm_start, dtype=float)
    if v.shape != (cfg.horizon, cfg.m):
        raise ValueError(f"warm start must have shape {(cfg.horizon, cfg.m)}, got {v.shape}")
    bounds = cfg.control_bounds if cfg.control_bounds is not None else dyn.base.input_bounds
    history = history.snapshot()
    x0 = np.asarray(x0, dtype=float)
    control_term = 0.0
    states = costs = weights = None

    for i in range(cfg.iterations):
        noise = sample_noise(cfg, iteration * cfg.iterations + i)
        chunks = np.array_split(np.arange(cfg.samples), max(1, min(cfg.workers, cfg.samples)))
        if len(chunks) == 1:
            results = [_score_chunk(dyn, x0, v, noise, bounds, tasks, history, now)]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                results = list(pool.map(
                    lambda idx: _score_chunk(dyn, x0, v, noise[idx], bounds, tasks, history, now),
                    chunks))
        states = np.concatenate([r[0] for r in results], axis=0)
        control_term = control_cost(v, cfg)
        costs = np.concatenate([r[1] for r in results]) + control_term
        weights = softmin_weights(costs, cfg.temperature)
        v = update_mean(v, noise, weights, bounds)

    nominal = rollout(dyn, x0, v, None, bounds)
    mean_cost = float(sample_cost(nominal, v, v, cfg, tasks, history, now))
    return MppiSolution(v, weights, nominal, costs, mean_cost,
                        states if keep_samples else None)


class MppiPlanner:
    """Receding-horizon wrapper: warm starts each cycle from the shifted mean."""

    def __init__(self, cfg: MppiConfig, dyn: DiscreteDynamics, tasks: TaskSet):
        self.cfg = cfg
        self.dyn = dyn
        self.tasks = tasks
        self.mean = np.zeros((cfg.horizon, cfg.m))
        self.cycle = 0
        self.last: Optional[MppiSolution] = None

    def plan(self, x, history: HistoryBuffer, now: float, keep_samples: bool = False) -> MppiSolution:
        sol = solve(self.cfg, self.dyn, x, self.tasks, history, now, self.mean,
                    iteration=self.cycle, keep_samples=keep_samples)
        self.cycle += 1
        self.last = sol
        self.mean = receding_shift(sol.mean)
        return sol
