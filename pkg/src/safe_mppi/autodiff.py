"""Forward-mode automatic differentiation with vector-tangent dual numbers.

A :class:`Dual` carries a value and a tangent vector. Functions written with
numpy ufuncs (``np.sin``, ``np.sqrt``, ...) and ordinary arithmetic work on
object arrays of duals unchanged, so models and barriers only need to be
written once. Duals nest: a dual whose value is itself a dual gives second
derivatives, which is how :func:`hessian` works.
"""

from __future__ import annotations

import numpy as np


def _value(a):
    return a.val if isinstance(a, Dual) else a


class Dual:
    __slots__ = ("val", "der")

    def __init__(self, val, der):
        self.val = val
        self.der = der

    def __repr__(self):
        return f"Dual({self.val!r}, {self.der!r})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Dual(self.val + other, self.der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Dual(self.val - other, self.der)

    def __rsub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Dual(other - self.val, -self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.der * other.val + other.der * self.val)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Dual(self.val * other, self.der * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv,
                        (self.der - other.der * (self.val * inv)) * inv)
        if isinstance(other, np.ndarray):
            return NotImplemented
        return Dual(self.val / other, self.der / other)

    def __rtruediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        inv = 1.0 / self.val
        return Dual(other * inv, self.der * (-other * inv * inv))

    def __pow__(self, p):
        if isinstance(p, Dual):
            return np.exp(p * np.log(self))
        if p == 0:
            return Dual(self.val ** 0, self.der * 0.0)
        if p == 1:
            return self
        if p == 2:
            return self * self
        return Dual(self.val ** p, self.der * (p * self.val ** (p - 1)))

    def __rpow__(self, base):
        return np.exp(self * np.log(base))

    # comparisons act on the primal value so branching code still runs
    def __lt__(self, other):
        return _value(self) < _value(other)

    def __le__(self, other):
        return _value(self) <= _value(other)

    def __gt__(self, other):
        return _value(self) > _value(other)

    def __ge__(self, other):
        return _value(self) >= _value(other)

    def __float__(self):
        return float(_value(self.val))

    # numpy object-array ufunc hooks --------------------------------------
    def sin(self):
        return Dual(np.sin(self.val), self.der * np.cos(self.val))

    def cos(self):
        return Dual(np.cos(self.val), self.der * -np.sin(self.val))

    def tan(self):
        c = np.cos(self.val)
        return Dual(np.tan(self.val), self.der / (c * c))

    def exp(self):
        e = np.exp(self.val)
        return Dual(e, self.der * e)

    def log(self):
        return Dual(np.log(self.val), self.der / self.val)

    def sqrt(self):
        s = np.sqrt(self.val)
        return Dual(s, self.der / (2.0 * s))

    def arctan2(self, other):
        # np.arctan2(y, x) dispatches to y.arctan2(x)
        y, x = self, other
        yv, xv = _value(y), _value(x)
        den = xv * xv + yv * yv
        dy = y.der if isinstance(y, Dual) else 0.0
        dx = x.der if isinstance(x, Dual) else 0.0
        return Dual(np.arctan2(yv, xv), (dy * xv - dx * yv) / den)

    def tanh(self):
        t = np.tanh(self.val)
        return Dual(t, self.der * (1.0 - t * t))

    def absolute(self):
        return self if _value(self) >= 0 else -self

    __abs__ = absolute

    def square(self):
        return self * self


def _seed(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[0]
    eye = np.eye(n)
    out = np.empty(n, dtype=object)
    for i in range(n):
        out[i] = Dual(x[i], eye[i])
    return out


def _tangents(y, n: int) -> np.ndarray:
    """Stack the tangent vectors of ``y`` (scalar or 1-D array) into rows."""
    y_arr = np.asarray(y, dtype=object)
    flat = y_arr.reshape(-1)
    rows = []
    for item in flat:
        if isinstance(item, Dual):
            rows.append(np.asarray(item.der))
        else:
            rows.append(np.zeros(n))
    out = np.stack(rows) if rows else np.zeros((0, n))
    return out.reshape(y_arr.shape + (n,))


def _primal(y):
    y_arr = np.asarray(y, dtype=object)
    out = np.empty(y_arr.shape, dtype=object)
    for idx, item in np.ndenumerate(y_arr):
        out[idx] = item.val if isinstance(item, Dual) else item
    return out


def _maybe_float(a):
    """Convert an object array to float unless it still holds duals."""
    a = np.asarray(a, dtype=object)
    if any(isinstance(v, Dual) for v in a.reshape(-1)):
        return a
    return a.astype(float)


def value_and_jacobian(fun, x):
    """Evaluate ``fun`` at ``x`` and return ``(fun(x), d fun / d x)``."""
    x = np.asarray(x)
    n = x.shape[0]
    y = fun(_seed(x))
    return _maybe_float(_primal(y)), _maybe_float(_tangents(y, n))


def jacobian(fun, x):
    return value_and_jacobian(fun, x)[1]


def gradient(fun, x):
    """Gradient of a scalar function."""
    return jacobian(fun, x).reshape(-1)


def hessian(fun, x):
    """Hessian of a scalar function by forward-over-forward nesting."""
    return jacobian(lambda z: gradient(fun, z), x)
