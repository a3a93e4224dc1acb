"""Control-affine system models and fixed-step integrators.

Models are evaluated on arrays whose last axis is the state, so the same
``drift``/``actuation`` callables serve a single state, a batch of MPPI
samples of shape ``(K, n)``, and object arrays of :class:`~safe_mppi.autodiff.Dual`
numbers when a Jacobian is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

SCHEMES = ("euler", "rk4", "euler_maruyama")


class NumericalBlowUp(RuntimeError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, state, message="non-finite state after integration step"):
        super().__init__(f"{message}: {np.asarray(state)!r}")
        self.state = np.asarray(state)


@dataclass(frozen=True, eq=False)
class ControlAffineModel:
    """xdot = f(x) + g(x) u."""

    n: int
    m: int
    drift: Callable
    actuation: Callable
    input_bounds: np.ndarray
    name: str = "custom"
    position_indices: tuple = (0, 1)

    def __post_init__(self):
        bounds = np.asarray(self.input_bounds, dtype=float).reshape(self.m, 2)
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValueError("input_bounds must satisfy lo <= hi per channel")
        object.__setattr__(self, "input_bounds", bounds)

    @property
    def base(self) -> "ControlAffineModel":
        return self

    def clamp(self, u):
        return np.clip(u, self.input_bounds[:, 0], self.input_bounds[:, 1])

    def xdot(self, x, u):
        g = self.actuation(x)
        u = np.asarray(u)
        if g.dtype == object or u.dtype == object:
            return self.drift(x) + (g * u[..., None, :]).sum(axis=-1)
        return self.drift(x) + np.einsum("...ij,...j->...i", g, u)

    def position(self, x):
        x = np.asarray(x)
        return x[..., list(self.position_indices)]


@dataclass(frozen=True, eq=False)
class DisturbedModel:
    """xdot = f(x) + g(x) u + M w with w in a hypercube."""

    base: ControlAffineModel
    disturbance_matrix: np.ndarray
    disturbance_bound: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.disturbance_matrix, dtype=float))
        bound = np.atleast_1d(np.asarray(self.disturbance_bound, dtype=float))
        if M.shape[0] != self.base.n:
            raise ValueError(f"disturbance matrix needs {self.base.n} rows, got {M.shape[0]}")
        if bound.shape != (M.shape[1],):
            raise ValueError("disturbance_bound length must equal the disturbance dimension")
        if not np.all((M == 0.0) | (M == 1.0)):
            raise ValueError("disturbance matrix entries must be 0 or 1")
        if np.any((M != 0.0).sum(axis=1) > 1):
            raise ValueError("each disturbance matrix row may hold at most one nonzero")
        if np.any(bound < 0):
            raise ValueError("disturbance bounds must be nonnegative")
        object.__setattr__(self, "disturbance_matrix", M)
        object.__setattr__(self, "disturbance_bound", bound)

    @property
    def n(self):
        return self.base.n

    @property
    def m(self):
        return self.base.m

    @property
    def l(self):
        return self.disturbance_matrix.shape[1]


@dataclass(frozen=True, eq=False)
class StochasticModel:
    """dx = (f(x) + g(x) u) dt + sigma(x) dw."""

    base: ControlAffineModel
    diffusion: Callable
    q: int

    @property
    def n(self):
        return self.base.n

    @property
    def m(self):
        return self.base.m


AnyModel = Union[ControlAffineModel, DisturbedModel, StochasticModel]


@dataclass(frozen=True, eq=False)
class DiscreteDynamics:
    model: AnyModel
    dt: float
    scheme: str = "euler"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "euler_maruyama" and not isinstance(self.model, StochasticModel):
            raise ValueError("euler_maruyama requires a StochasticModel")
        if self.scheme == "rk4" and isinstance(self.model, StochasticModel):
            raise ValueError("rk4 is only defined for deterministic models")

    @property
    def base(self) -> ControlAffineModel:
        return self.model.base

    def nominal(self) -> "DiscreteDynamics":
        """Deterministic Euler/RK4 map on the nominal model, as used by planners."""
        scheme = "rk4" if self.scheme == "rk4" else "euler"
        return DiscreteDynamics(self.base, self.dt, scheme)

    def mean_map(self, x, u, clamp: bool = True):
        """The discrete map F(x, u) without noise or disturbance (no finiteness check)."""
        base = self.base
        if clamp:
            u = base.clamp(u)
        if self.scheme == "rk4":
            return _rk4(base, x, u, self.dt)
        return _euler(base, x, u, self.dt)


def _euler(model: ControlAffineModel, x, u, dt):
    return x + dt * model.xdot(x, u)


def _rk4(model: ControlAffineModel, x, u, dt):
    k1 = model.xdot(x, u)
    k2 = model.xdot(x + 0.5 * dt * k1, u)
    k3 = model.xdot(x + 0.5 * dt * k2, u)
    k4 = model.xdot(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _checked(x):
    if not np.all(np.isfinite(x)):
        raise NumericalBlowUp(x)
    return x


def step_euler(dyn: DiscreteDynamics, x, u):
    """One forward-Euler step with the input clamped and held over the step."""
    if dyn.scheme != "euler":
        raise ValueError(f"step_euler called on a {dyn.scheme!r} discretization")
    x = np.asarray(x, dtype=float)
    return _checked(_euler(dyn.base, x, dyn.base.clamp(np.asarray(u, dtype=float)), dyn.dt))


def step_rk4(dyn: DiscreteDynamics, x, u):
    if dyn.scheme != "rk4":
        raise ValueError(f"step_rk4 called on a {dyn.scheme!r} discretization")
    x = np.asarray(x, dtype=float)
    return _checked(_rk4(dyn.base, x, dyn.base.clamp(np.asarray(u, dtype=float)), dyn.dt))


def wiener_increment(q: int, dt: float, rng: np.random.Generator, batch=()):
    return rng.standard_normal(tuple(batch) + (q,)) * np.sqrt(dt)


def step_euler_maruyama(dyn: DiscreteDynamics, x, u, rng: np.random.Generator, dw=None):
    """x + dt (f + g u) + sigma(x) dw with dw ~ N(0, dt I_q) drawn from ``rng``.

    ``dw`` may be supplied directly (shape ``(..., q)``), in which case ``rng`` is unused.
    """
    if dyn.scheme != "euler_maruyama":
        raise ValueError(f"step_euler_maruyama called on a {dyn.scheme!r} discretization")
    model: StochasticModel = dyn.model
    x = np.asarray(x, dtype=float)
    if dw is None:
        dw = wiener_increment(model.q, dyn.dt, rng, x.shape[:-1])
    sigma = model.diffusion(x)
    drift_part = _euler(model.base, x, model.base.clamp(np.asarray(u, dtype=float)), dyn.dt)
    return _checked(drift_part + (sigma * np.asarray(dw)[..., None, :]).sum(axis=-1))


def disturbed_step(dyn: DiscreteDynamics, x, u, w):
    """Euler step of xdot = f + g u + M w; ``w`` must lie in the disturbance hypercube."""
    model = dyn.model
    if not isinstance(model, DisturbedModel):
        raise TypeError("disturbed_step requires a DisturbedModel")
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != model.l:
        raise ValueError(f"disturbance must have length {model.l}")
    if np.any(np.abs(w) > model.disturbance_bound * (1.0 + 1e-12)):
        raise ValueError(f"disturbance {w} outside hypercube of half-widths {model.disturbance_bound}")
    x = np.asarray(x, dtype=float)
    u = model.base.clamp(np.asarray(u, dtype=float))
    return _checked(x + dyn.dt * (model.base.xdot(x, u) + w @ model.disturbance_matrix.T))


def step(dyn: DiscreteDynamics, x, u, rng=None):
    """Dispatch to the integrator named by ``dyn.scheme``."""
    if dyn.scheme == "euler":
        return step_euler(dyn, x, u)
    if dyn.scheme == "rk4":
        return step_rk4(dyn, x, u)
    return step_euler_maruyama(dyn, x, u, rng)


# ---------------------------------------------------------------------------
# built-in models

def _zeros_like_state(x, n):
    return np.zeros(np.shape(x)[:-1] + (n,))


def single_integrator_2d(speed_bound: float = 2.0) -> ControlAffineModel:
    """Planar point robot commanded in velocity: state (px, py), input (vx, vy)."""
    eye = np.eye(2)

    def drift(x):
        return _zeros_like_state(x, 2)

    def actuation(x):
        return np.broadcast_to(eye, np.shape(x)[:-1] + (2, 2))

    b = float(speed_bound)
    return ControlAffineModel(2, 2, drift, actuation, [[-b, b], [-b, b]],
                              name="single_integrator_2d")


def extended_unicycle(accel_bound: float = 2.0, omega_bound: float = 3.0) -> ControlAffineModel:
    """Unicycle with speed as a state: x = (px, py, theta, v), u = (a, omega)."""
    g = np.array([[0.0, 0.0],
                  [0.0, 0.0],
                  [0.0, 1.0],
                  [1.0, 0.0]])

    def drift(x):
        x = np.asarray(x)
        theta = x[..., 2]
        v = x[..., 3]
        zero = v * 0.0
        return np.stack([v * np.cos(theta), v * np.sin(theta), zero, zero], axis=-1)

    def actuation(x):
        return np.broadcast_to(g, np.shape(x)[:-1] + (4, 2))

    return ControlAffineModel(4, 2, drift, actuation,
                              [[-accel_bound, accel_bound], [-omega_bound, omega_bound]],
                              name="extended_unicycle")


def double_integrator(accel_bound: float = 10.0) -> ControlAffineModel:
    """x1' = x2, x2' = u."""
    g = np.array([[0.0], [1.0]])

    def drift(x):
        x = np.asarray(x)
        return np.stack([x[..., 1], x[..., 1] * 0.0], axis=-1)

    def actuation(x):
        return np.broadcast_to(g, np.shape(x)[:-1] + (2, 1))

    return ControlAffineModel(2, 1, drift, actuation, [[-accel_bound, accel_bound]],
                              name="double_integrator", position_indices=(0,))


def constant_diffusion(model: ControlAffineModel, scale: float) -> StochasticModel:
    """sigma(x) = scale * I_n, one Wiener channel per state."""
    sigma = float(scale) * np.eye(model.n)

    def diffusion(x):
        return np.broadcast_to(sigma, np.shape(x)[:-1] + sigma.shape)

    return StochasticModel(model, diffusion, model.n)


MODEL_REGISTRY: dict = {
    "single_integrator_2d": single_integrator_2d,
    "extended_unicycle": extended_unicycle,
    "double_integrator": double_integrator,
}


def register_model(name: str, factory: Callable[..., ControlAffineModel]) -> None:
    MODEL_REGISTRY[name] = factory


def make_model(name: str, **params) -> ControlAffineModel:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model id {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**params)
