"""Scenario files: JSON schema, validation, and construction of runtime objects."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..cbf_filter import VARIANTS, BarrierFunction, ClassK, circle_barrier, rectify_relative_degree
from ..dynamics import (
    MODEL_REGISTRY,
    ControlAffineModel,
    DiscreteDynamics,
    DisturbedModel,
    constant_diffusion,
    make_model,
)
from ..estimation import SensorModel
from ..mppi import MppiConfig, default_noise_std
from ..reach_avoid import COMBINATIONS, AvoidTask, GoalTask, TaskSet

SCENARIO_VERSION = 1
NOMINAL_CONTROLLERS = ("mppi_first_control", "proportional_to_goal", "zero")
ESTIMATORS = ("none", "ekf", "ukf")


class ScenarioError(ValueError):
    """The scenario file is malformed or inconsistent."""


@dataclass
class Scenario:
    """A validated scenario. ``raw`` keeps the parsed JSON for round-tripping."""

    raw: dict
    name: str
    model_id: str
    model: ControlAffineModel
    initial_state: np.ndarray
    duration: float
    dt: float
    tasks: Optional[TaskSet]
    goals: tuple
    obstacles: tuple
    planner: Optional[MppiConfig]
    nominal_controller: dict
    filter: dict
    estimator: str
    sensor: SensorModel
    initial_covariance: np.ndarray
    plant_noise: float
    disturbance: Optional[dict]
    seed: int = 0
    source: Optional[str] = None
    _barriers: Optional[list] = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def plant_model(self):
        if self.plant_noise > 0:
            return constant_diffusion(self.model, self.plant_noise)
        if self.disturbance is not None:
            return DisturbedModel(self.model, self.disturbance["matrix"], self.disturbance["bound"])
        return self.model

    def plant_dynamics(self) -> DiscreteDynamics:
        model = self.plant_model()
        scheme = "euler_maruyama" if self.plant_noise > 0 else "euler"
        return DiscreteDynamics(model, self.dt, scheme)

    def planner_dynamics(self) -> DiscreteDynamics:
        return DiscreteDynamics(self.model, self.dt, "euler")

    def filter_model(self):
        """Model handed to the CBF constraint builder (carries sigma or M as needed)."""
        return self.plant_model()

    def barriers(self) -> list:
        """Filter barriers, rectified to relative degree one for the model."""
        if self._barriers is None:
            spec = self.filter
            gains = spec.get("rectify_gains", [1.0, 1.0])
            out = []
            for i, b in enumerate(spec.get("circles", [])):
                h = circle_barrier((b["x"], b["y"]), b["radius"], self.model.position_indices,
                                   name=f"obstacle{i}")
                out.append(rectify_relative_degree(h, self.model, gains))
            self._barriers = out
        return self._barriers

    def class_k(self) -> ClassK:
        return ClassK(float(self.filter.get("gamma", 1.0)))

    def with_overrides(self, **changes) -> "Scenario":
        """Re-validate a copy of the raw scenario with top-level or dotted-path overrides."""
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            _set_path(raw, key.split("__"), value)
        return parse_scenario(raw, source=self.source)


def _set_path(d, path, value):
    for key in path[:-1]:
        if not isinstance(d.get(key), dict):
            d[key] = {}
        d = d[key]
    d[path[-1]] = value


def _require(cond, message):
    if not cond:
        raise ScenarioError(message)


def _float(d, key, default=None, positive=False):
    value = d.get(key, default)
    _require(value is not None, f"missing required key {key!r}")
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"key {key!r} must be a number, got {value!r}") from None
    _require(math.isfinite(value), f"key {key!r} must be finite")
    if positive:
        _require(value > 0, f"key {key!r} must be positive")
    return value


def _matrix(value, name):
    try:
        arr = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise ScenarioError(f"{name} must be a numeric matrix") from None
    _require(np.all(np.isfinite(arr)), f"{name} must be finite")
    return arr


def _parse_model(raw):
    spec = raw.get("model")
    _require(spec is not None, "missing required key 'model'")
    if isinstance(spec, str):
        spec = {"id": spec}
    model_id = spec.get("id")
    _require(model_id in MODEL_REGISTRY, f"unknown model id {model_id!r}; known: {sorted(MODEL_REGISTRY)}")
    try:
        model = make_model(model_id, **spec.get("params", {}))
    except TypeError as exc:
        raise ScenarioError(f"bad model params for {model_id!r}: {exc}") from None
    return model_id, model


def _parse_tasks(raw, model):
    spec = raw.get("tasks", {}) or {}
    combination = spec.get("combination", "penalty_sum")
    _require(combination in COMBINATIONS, f"tasks.combination must be one of {COMBINATIONS}")
    goals, obstacles = [], []
    for i, g in enumerate(spec.get("goals", [])):
        window = g.get("window")
        if window is not None:
            _require(len(window) == 2 and float(window[0]) < float(window[1]),
                     f"goal {i}: window must be [t1, t2] with t1 < t2")
        try:
            goals.append(GoalTask((_float(g, "x"), _float(g, "y")), _float(g, "radius", positive=True),
                                  _float(g, "gain", 1.0, positive=True),
                                  tuple(window) if window is not None else None, name=g.get("name", f"g{i + 1}")))
        except ValueError as exc:
            raise ScenarioError(f"goal {i}: {exc}") from None
    for i, o in enumerate(spec.get("obstacles", [])):
        try:
            obstacles.append(AvoidTask((_float(o, "x"), _float(o, "y")), _float(o, "radius", 0.0),
                                       _float(o, "gain", 1.0, positive=True), _float(o, "epsilon", 0.01),
                                       name=o.get("name", f"o{i + 1}")))
        except ValueError as exc:
            raise ScenarioError(f"obstacle {i}: {exc}") from None
    _require(len(model.position_indices) == 2 or not (goals or obstacles),
             "goal and obstacle tasks need a model with a planar position")
    tasks = None
    if goals or obstacles:
        tasks = TaskSet(goals, obstacles, combination, model.position_indices)
    return tasks, tuple(goals), tuple(obstacles)


def _parse_planner(raw, model, dt):
    spec = raw.get("planner", "none")
    if spec in (None, "none"):
        return None
    _require(isinstance(spec, dict), "planner must be 'none' or an object")
    horizon = int(_float(spec, "horizon", positive=True))
    samples = int(_float(spec, "samples", positive=True))
    std = spec.get("noise_std")
    if std is None:
        std = default_noise_std(model.input_bounds)
    std = np.asarray(std, dtype=float).reshape(-1)
    _require(std.shape == (model.m,), f"planner.noise_std needs {model.m} entries")
    _require(np.all(std >= 0), "planner.noise_std must be nonnegative")
    return MppiConfig(horizon=horizon, samples=samples,
                      temperature=_float(spec, "lambda", 1.0, positive=True),
                      noise_covariance=std ** 2, control_bounds=model.input_bounds,
                      seed=int(spec.get("seed", 0)), iterations=int(spec.get("iterations", 1)),
                      workers=int(spec.get("workers", 1)))


def _parse_filter(raw, obstacles):
    spec = raw.get("filter", "none")
    if spec in (None, "none"):
        return {"variant": "none"}
    _require(isinstance(spec, dict), "filter must be 'none' or an object")
    spec = dict(spec)
    variant = spec.get("variant", "vanilla")
    _require(variant in VARIANTS, f"filter.variant must be one of {VARIANTS}")
    _float(spec, "gamma", 1.0, positive=True)
    margin = _float(spec, "margin", 0.0)
    _require(margin >= 0, "filter.margin must be nonnegative")
    barriers = spec.get("barriers", "obstacles")
    if barriers == "obstacles":
        circles = [{"x": o.obstacle_position[0], "y": o.obstacle_position[1],
                    "radius": o.physical_radius + margin} for o in obstacles]
    else:
        _require(isinstance(barriers, list), "filter.barriers must be 'obstacles' or a list")
        circles = [{"x": _float(b, "x"), "y": _float(b, "y"),
                    "radius": _float(b, "radius", positive=True) + margin} for b in barriers]
    for c in circles:
        _require(c["radius"] > 0, "filter barrier radius (physical + margin) must be positive")
    gains = spec.get("rectify_gains", [1.0, 1.0])
    _require(all(float(g) > 0 for g in gains), "filter.rectify_gains must be positive")
    spec["circles"] = circles
    return spec


def _parse_nominal(raw, planner):
    spec = raw.get("nominal_controller", "mppi_first_control" if planner else "proportional_to_goal")
    if isinstance(spec, str):
        spec = {"type": spec}
    _require(spec.get("type") in NOMINAL_CONTROLLERS,
             f"nominal_controller must be one of {NOMINAL_CONTROLLERS}")
    if spec["type"] == "mppi_first_control":
        _require(planner is not None, "nominal_controller 'mppi_first_control' requires a planner")
    return dict(spec)


def parse_scenario(raw: dict, source: Optional[str] = None) -> Scenario:
    """Validate a scenario dictionary and build its runtime objects."""
    _require(isinstance(raw, dict), "scenario must be a JSON object")
    version = raw.get("spec_version")
    _require(version == SCENARIO_VERSION,
             f"unsupported spec_version {version!r} (expected {SCENARIO_VERSION})")
    model_id, model = _parse_model(raw)
    x0 = np.asarray(raw.get("initial_state", []), dtype=float).reshape(-1)
    _require(x0.shape == (model.n,), f"initial_state needs {model.n} entries for {model_id}")
    _require(np.all(np.isfinite(x0)), "initial_state must be finite")
    duration = _float(raw, "duration", positive=True)
    dt = _float(raw, "dt", positive=True)
    ratio = duration / dt
    _require(abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio), "duration must be an integer multiple of dt")
    plant_noise = _float(raw, "plant_noise", 0.0)
    _require(plant_noise >= 0, "plant_noise must be nonnegative")

    tasks, goals, obstacles = _parse_tasks(raw, model)
    planner = _parse_planner(raw, model, dt)
    if planner is not None:
        _require(tasks is not None, "a planner needs at least one goal or obstacle task")
    nominal = _parse_nominal(raw, planner)
    if nominal["type"] == "proportional_to_goal":
        _require(goals, "proportional_to_goal needs at least one goal")
        _require(model_id in ("single_integrator_2d", "extended_unicycle"),
                 f"proportional_to_goal is not defined for model {model_id!r}")
    filt = _parse_filter(raw, obstacles)

    disturbance = raw.get("disturbance")
    if disturbance is not None:
        M = _matrix(disturbance.get("matrix"), "disturbance.matrix")
        bound = np.asarray(disturbance.get("bound"), dtype=float).reshape(-1)
        try:
            DisturbedModel(model, M, bound)
        except ValueError as exc:
            raise ScenarioError(f"disturbance: {exc}") from None
        _require(plant_noise == 0, "a plant cannot be both stochastic and disturbed")
        disturbance = {"matrix": M, "bound": bound}
    if filt["variant"] == "robust":
        _require(disturbance is not None, "robust filter needs a 'disturbance' block")
    if filt["variant"] == "stochastic":
        _require(plant_noise > 0, "stochastic filter needs plant_noise > 0")

    estimator = raw.get("estimator", "none")
    _require(estimator in ESTIMATORS, f"estimator must be one of {ESTIMATORS}")
    sensor_spec = raw.get("sensor") or {}
    C = _matrix(sensor_spec.get("C", np.eye(model.n).tolist()), "sensor.C")
    D = _matrix(sensor_spec.get("D", np.zeros((C.shape[0], C.shape[0])).tolist()), "sensor.D")
    _require(C.shape[1] == model.n, f"sensor.C needs {model.n} columns")
    _require(D.shape[0] == C.shape[0], "sensor.D must have as many rows as sensor.C")
    if estimator == "none":
        _require(np.linalg.matrix_rank(C) == model.n, "estimator 'none' needs a full-rank sensor.C")
    sensor = SensorModel(C, D, dt)
    P0 = raw.get("initial_covariance")
    P0 = np.eye(model.n) * 1e-6 if P0 is None else _matrix(P0, "initial_covariance")
    if P0.shape == (1, model.n):
        P0 = np.diag(P0[0])
    _require(P0.shape == (model.n, model.n), "initial_covariance must be n x n or a length-n diagonal")

    return Scenario(raw=raw, name=str(raw.get("name", "scenario")), model_id=model_id, model=model,
                    initial_state=x0, duration=duration, dt=dt, tasks=tasks, goals=goals,
                    obstacles=obstacles, planner=planner, nominal_controller=nominal, filter=filt,
                    estimator=estimator, sensor=sensor, initial_covariance=P0,
                    plant_noise=plant_noise, disturbance=disturbance,
                    seed=int(raw.get("seed", 0)), source=source)


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
    return parse_scenario(raw, source=str(path))


def packaged_scenario_names() -> list:
    root = resources.files("safe_mppi") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def packaged_scenario(name: str) -> Scenario:
    root = resources.files("safe_mppi") / "scenarios"
    res = root / f"{name}.json"
    if not res.is_file():
        raise ScenarioError(f"no packaged scenario named {name!r}")
    return parse_scenario(json.loads(res.read_text()), source=f"package:{name}")


def scenario_to_json(scenario: Scenario) -> str:
    def default(o: Any):
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    return json.dumps(scenario.raw, indent=2, default=default)
