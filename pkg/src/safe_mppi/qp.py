"""Small dense projection QP: min 1/2 |u - u_ref|^2  s.t.  a_i^T u >= b_i, lo <= u <= hi.

Solved with the Goldfarb-Idnani dual active-set method. With an identity
Hessian the unconstrained optimum is ``u_ref`` itself, so the iteration starts
there and adds the most violated constraint each round. Infeasibility shows
up as an unbounded dual step and is confirmed by a phase-1 linear program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize, nnls


@dataclass(frozen=True)
class HalfspaceConstraint:
    """normal^T u >= offset."""

    normal: np.ndarray
    offset: float
    label: str = ""

    def __post_init__(self):
        a = np.asarray(self.normal, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(a)) and np.isfinite(self.offset)):
            raise ValueError("constraint entries must be finite")
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))

    def slack(self, u) -> float:
        return float(self.normal @ np.asarray(u, dtype=float) - self.offset)


@dataclass
class QpSpec:
    reference: np.ndarray
    constraints: list = field(default_factory=list)
    box: np.ndarray = None

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float).reshape(-1)
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=float).reshape(-1, 2)
            if np.any(self.box[:, 0] > self.box[:, 1]):
                raise ValueError("empty box bounds")

    def stacked(self):
        """All constraints (halfspaces then box rows) as ``A u >= b``."""
        m = self.reference.shape[0]
        rows = [c.normal for c in self.constraints]
        rhs = [c.offset for c in self.constraints]
        labels = [c.label or f"halfspace[{i}]" for i, c in enumerate(self.constraints)]
        if self.box is not None:
            eye = np.eye(m)
            for i in range(m):
                rows += [eye[i], -eye[i]]
                rhs += [self.box[i, 0], -self.box[i, 1]]
                labels += [f"box_lo[{i}]", f"box_hi[{i}]"]
        A = np.array(rows, dtype=float).reshape(-1, m)
        return A, np.array(rhs, dtype=float), labels


class FilterInfeasible(RuntimeError):
    """No control satisfies every constraint."""

    def __init__(self, message, constraint=None, violation=None):
        super().__init__(message)
        self.constraint = constraint
        self.violation = violation


def _phase_one(A, b):
    """min t s.t. A u + t >= b, t >= 0. Returns (t*, u*)."""
    k, m = A.shape
    c = np.zeros(m + 1)
    c[-1] = 1.0
    A_ub = -np.hstack([A, np.ones((k, 1))])
    bounds = [(None, None)] * m + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=-b, bounds=bounds, method="highs")
    if res.status != 0:
        return np.inf, np.zeros(m)
    return float(res.x[-1]), res.x[:m]


def _infeasible(A, b, labels, u):
    s = A @ u - b
    worst = int(np.argmin(s))
    return FilterInfeasible(
        f"QP infeasible; most violated constraint {labels[worst]} by {-s[worst]:.3e}",
        constraint=labels[worst], violation=float(-s[worst]))


def kkt_residual(spec: QpSpec, u, multipliers=None) -> float:
    """Largest of primal violation and stationarity error (multipliers via NNLS if absent)."""
    A, b, _ = spec.stacked()
    u = np.asarray(u, dtype=float)
    s = A @ u - b
    primal = float(max(0.0, -s.min())) if s.size else 0.0
    active = np.abs(s) <= 1e-7 * (1.0 + np.abs(b))
    if not active.any():
        return max(primal, float(np.abs(u - spec.reference).max()))
    lam, res = nnls(A[active].T, u - spec.reference)
    return max(primal, res)


def solve_qp(spec: QpSpec, max_iter: int = 100, tol: float = 1e-12) -> np.ndarray:
    A, b, labels = spec.stacked()
    x = spec.reference.copy()
    if A.shape[0] == 0:
        return x
    norms = np.linalg.norm(A, axis=1)
    scale = np.where(norms > 0, norms, 1.0)
    thresh = tol * (1.0 + np.abs(b))

    active: list = []
    lam: list = []
    for _ in range(max_iter):
        s = A @ x - b
        norm_s = s / scale
        if active:
            norm_s[active] = np.inf
        p = int(np.argmin(norm_s))
        if s[p] >= -thresh[p]:
            return x
        if norms[p] == 0.0:
            raise _infeasible(A, b, labels, x)

        s_p = s[p]
        lam_p = 0.0
        for _inner in range(max_iter):
            n_p = A[p]
            if active:
                N = A[active].T
                r = np.linalg.lstsq(N, n_p, rcond=None)[0]
                z = n_p - N @ r
            else:
                r = np.zeros(0)
                z = n_p
            zz = float(z @ n_p)
            full_ok = zz > 1e-14 * norms[p] ** 2

            t2, block = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    ratio = lam[j] / rj
                    if ratio < t2:
                        t2, block = ratio, j
            if not full_ok and block < 0:
                t_lp, u_lp = _phase_one(A, b)
                if t_lp > 1e-9:
                    raise _infeasible(A, b, labels, u_lp)
                return _polish(spec, A, b, u_lp)
            t1 = -s_p / zz if full_ok else np.inf
            t = min(t1, t2)
            if full_ok:
                x = x + t * z
                s_p = s_p + t * zz
            lam = [lj - t * rj for lj, rj in zip(lam, r)]
            lam_p += t
            if t == t1:
                active.append(p)
                lam.append(lam_p)
                break
            del active[block]
            del lam[block]
    t_lp, u_lp = _phase_one(A, b)
    if t_lp > 1e-9:
        raise _infeasible(A, b, labels, u_lp)
    return _polish(spec, A, b, u_lp)


def _polish(spec: QpSpec, A, b, start):
    """Fallback general solver when the active-set loop stalls on a feasible problem."""
    ref = spec.reference
    res = minimize(lambda u: 0.5 * np.sum((u - ref) ** 2), start, jac=lambda u: u - ref,
                   constraints=[{"type": "ineq", "fun": lambda u: A @ u - b, "jac": lambda u: A}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x
