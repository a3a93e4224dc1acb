"""Control barrier functions and the QP safety filter.

A barrier ``h`` defines the safe set ``{x : h(x) >= 0}``. The filter keeps
``dh/dt >= -nu(h)`` by projecting the nominal control onto the halfspaces
that condition induces at the current state. Three variants are assembled
here: vanilla (deterministic model), robust (worst case over a disturbance
hypercube) and stochastic (Ito drift of ``h`` under an SDE).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff
from . import rng as rngmod
from .dynamics import ControlAffineModel, DisturbedModel, StochasticModel
from .qp import FilterInfeasible, HalfspaceConstraint, QpSpec, solve_qp

VARIANTS = ("vanilla", "robust", "stochastic", "none")
DEGENERATE_TOL = 1e-9


class DegenerateConstraint(FilterInfeasible):
    """The control has no influence on h at this state, yet the condition is violated."""


class RelativeDegreeTooHigh(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BarrierFunction:
    """Scalar safety function with first and second derivatives.

    Missing derivatives are filled in by forward-mode differentiation of
    ``value``, which must then accept object arrays of dual numbers.
    """

    value: Callable
    gradient: Optional[Callable] = None
    hessian: Optional[Callable] = None
    name: str = ""
    relative_degree: int = 1

    def __post_init__(self):
        value = self.value
        if self.gradient is None:
            object.__setattr__(self, "gradient", lambda x: autodiff.gradient(value, x))
        if self.hessian is None:
            object.__setattr__(self, "hessian", lambda x: autodiff.hessian(value, x))

    def __call__(self, x):
        return self.value(x)


@dataclass(frozen=True)
class ClassK:
    """Linear extended class-K function nu(h) = gain * h."""

    gain: float = 1.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("class-K gain must be positive")

    def __call__(self, h):
        return self.gain * h


def circle_barrier(center, radius: float, position_indices=(0, 1), name: str = "") -> BarrierFunction:
    """h(x) = |p - c|^2 - r^2 on the position components of the state."""
    if not radius > 0:
        raise ValueError("circle barrier radius must be positive")
    c = np.asarray(center, dtype=float)
    idx = list(position_indices)
    r2 = float(radius) ** 2

    def value(x):
        total = -r2
        for i, ci in zip(idx, c):
            d = x[i] - ci
            total = total + d * d
        return total

    def gradient(x):
        n = len(x)
        out = [0.0] * n
        for i, ci in zip(idx, c):
            out[i] = 2.0 * (x[i] - ci)
        if any(isinstance(v, autodiff.Dual) for v in out):
            arr = np.empty(n, dtype=object)
            arr[:] = out
            return arr
        return np.array(out, dtype=float)

    def hessian(x):
        H = np.zeros((len(x), len(x)))
        H[idx, idx] = 2.0
        return H

    return BarrierFunction(value, gradient, hessian, name=name or f"circle{tuple(c)}")


def _lie_terms(h: BarrierFunction, model: ControlAffineModel, x):
    grad = np.asarray(h.gradient(x), dtype=float)
    return float(h.value(x)), grad, float(grad @ model.drift(x)), grad @ model.actuation(x)


def _constraint(a, b, label):
    a = np.asarray(a, dtype=float)
    if np.linalg.norm(a) < DEGENERATE_TOL and b > 0:
        raise DegenerateConstraint(f"control cannot influence barrier {label!r} (required {b:.3e} > 0)",
                                   constraint=label, violation=float(b))
    return HalfspaceConstraint(a, b, label)


def vanilla_constraint(h: BarrierFunction, model, alpha: ClassK, x) -> HalfspaceConstraint:
    """grad h (f + g u) >= -nu(h)  ->  a^T u >= b."""
    x = np.asarray(x, dtype=float)
    hv, _, lf, lg = _lie_terms(h, model.base, x)
    return _constraint(lg, -alpha(hv) - lf, h.name)


def robust_constraint(h: BarrierFunction, model: DisturbedModel, alpha: ClassK, x) -> HalfspaceConstraint:
    """Vanilla constraint tightened by the worst disturbance in the hypercube."""
    x = np.asarray(x, dtype=float)
    hv, grad, lf, lg = _lie_terms(h, model.base, x)
    tightening = float(np.abs(grad @ model.disturbance_matrix) @ model.disturbance_bound)
    return _constraint(lg, -alpha(hv) - lf + tightening, h.name)


def ito_term(h: BarrierFunction, model: StochasticModel, x) -> float:
    """1/2 tr(sigma^T Hess(h) sigma)."""
    sigma = np.asarray(model.diffusion(x), dtype=float)
    H = np.asarray(h.hessian(x), dtype=float)
    return 0.5 * float(np.trace(sigma.T @ H @ sigma))


def stochastic_constraint(h: BarrierFunction, model: StochasticModel, alpha: ClassK, x) -> HalfspaceConstraint:
    """grad h (f + g u) + 1/2 tr(sigma^T Hess(h) sigma) >= -nu(h)."""
    x = np.asarray(x, dtype=float)
    hv, _, lf, lg = _lie_terms(h, model.base, x)
    return _constraint(lg, -alpha(hv) - lf - ito_term(h, model, x), h.name)


def _control_appears(h: BarrierFunction, model: ControlAffineModel, samples) -> bool:
    for xs in samples:
        lg = np.asarray(h.gradient(xs), dtype=float) @ model.actuation(xs)
        if np.max(np.abs(lg)) > DEGENERATE_TOL:
            return True
    return False


def _lie_step(psi: BarrierFunction, model: ControlAffineModel, gain: float, k: int) -> BarrierFunction:
    def value(x):
        grad = psi.gradient(x)
        f = model.drift(x)
        total = gain * psi.value(x)
        for gi, fi in zip(grad, f):
            total = total + gi * fi
        return total

    return BarrierFunction(value, name=f"{psi.name}^({k})")


def rectify_relative_degree(h: BarrierFunction, model, gains: Sequence[float],
                            sample_states=None, max_degree: int = 3,
                            n_samples: int = 32, seed: int = 0) -> BarrierFunction:
    """Raise ``h`` to a relative-degree-one barrier by high-order CBF composition.

    psi_0 = h, psi_{i+1} = grad psi_i . f + gamma_i psi_i, stopping at the first
    psi_i whose control coefficient grad psi_i . g is nonzero on some sample
    state. The zero-superlevel set of the result lies inside that of ``h``
    whenever every intermediate psi_j is nonnegative along the trajectory.
    """
    base = model.base
    if sample_states is None:
        gen = rngmod.stream(seed, rngmod.RECTIFY)
        sample_states = gen.normal(scale=2.0, size=(n_samples, base.n))
    samples = [np.asarray(s, dtype=float) for s in sample_states]
    psi = h
    for k in range(max_degree):
        if _control_appears(psi, base, samples):
            return BarrierFunction(psi.value, psi.gradient, psi.hessian,
                                   name=psi.name, relative_degree=k + 1) if k else psi
        if k >= len(gains):
            raise ValueError(f"need at least {k + 1} class-K gains to rectify {h.name!r}")
        psi = _lie_step(psi, base, float(gains[k]), k + 1)
    raise RelativeDegreeTooHigh(
        f"control does not appear in {h.name!r} within {max_degree} differentiations")


def assemble_constraints(x, barriers, model, variant: str, alpha: ClassK) -> list:
    if variant not in VARIANTS:
        raise ValueError(f"unknown filter variant {variant!r}")
    if variant == "none":
        return []
    if variant == "robust" and not isinstance(model, DisturbedModel):
        raise TypeError("robust filter requires a DisturbedModel")
    if variant == "stochastic" and not isinstance(model, StochasticModel):
        raise TypeError("stochastic filter requires a StochasticModel")
    build = {"vanilla": vanilla_constraint, "robust": robust_constraint,
             "stochastic": stochastic_constraint}[variant]
    out = [build(h, model, alpha, x) for h in barriers]
    # a zero normal with b <= 0 is trivially satisfied
    return [c for c in out if np.linalg.norm(c.normal) >= DEGENERATE_TOL]


def filter(u_nom, x, barriers, model, variant: str = "vanilla",
           alpha: ClassK = ClassK(1.0), box=None) -> np.ndarray:
    """Minimally invasive correction of ``u_nom`` satisfying every barrier condition at ``x``.

    Raises :class:`FilterInfeasible` when no admissible control exists; the
    caller decides the fallback.
    """
    u_nom = np.asarray(u_nom, dtype=float)
    if variant == "none":
        return u_nom.copy()
    constraints = assemble_constraints(x, barriers, model, variant, alpha)
    if box is None:
        box = model.base.input_bounds
    return solve_qp(QpSpec(u_nom, constraints, box))


safety_filter = filter
