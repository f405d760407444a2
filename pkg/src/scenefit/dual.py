"""Vectorized forward-mode dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a tangent array of
shape ``S + (k,)`` holding the derivatives of every element with respect to
``k`` parameters. Arithmetic propagates tangents by the chain rule, so any
formula written with these operations yields exact directional derivatives
alongside its value.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")
    __array_priority__ = 1000

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=np.float64)
        self.tan = np.asarray(tan, dtype=np.float64)

    @classmethod
    def constant(cls, val, k: int) -> Dual:
        v = np.asarray(val, dtype=np.float64)
        return cls(v, np.zeros(v.shape + (k,)))

    @classmethod
    def variables(cls, values) -> Dual:
        """Seed a 1D parameter vector: tangent is the identity."""
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(v, np.eye(len(v)))

    @property
    def k(self) -> int:
        return self.tan.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.val.shape

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, k={self.k})"

    def _lift(self, other) -> Dual:
        if isinstance(other, Dual):
            return other
        return Dual.constant(other, self.k)

    # indexing / shaping

    def __getitem__(self, idx) -> Dual:
        if isinstance(idx, tuple):
            return Dual(self.val[idx], self.tan[idx + (slice(None),)])
        return Dual(self.val[idx], self.tan[idx])

    def reshape(self, *shape) -> Dual:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(self.val.reshape(shape), self.tan.reshape(tuple(shape) + (self.k,)))

    def sum(self, axis=None) -> Dual:
        if axis is None:
            return Dual(self.val.sum(), self.tan.reshape(self.val.size, self.k).sum(axis=0))
        axis = axis if axis >= 0 else self.val.ndim + axis
        return Dual(self.val.sum(axis=axis), self.tan.sum(axis=axis))

    def mean(self, axis=None) -> Dual:
        n = self.val.size if axis is None else self.val.shape[axis]
        return self.sum(axis) / n

    # arithmetic

    def __neg__(self) -> Dual:
        return Dual(-self.val, -self.tan)

    def __add__(self, other) -> Dual:
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        other = np.asarray(other, dtype=np.float64)
        return Dual(self.val + other, np.broadcast_to(self.tan, np.broadcast_shapes(
            self.val.shape, other.shape) + (self.k,)))

    __radd__ = __add__

    def __sub__(self, other) -> Dual:
        return self + (-self._lift(other) if isinstance(other, Dual) else -np.asarray(other))

    def __rsub__(self, other) -> Dual:
        return (-self) + other

    def __mul__(self, other) -> Dual:
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.tan * other.val[..., None] + other.tan * self.val[..., None])
        o = np.asarray(other, dtype=np.float64)
        return Dual(self.val * o, self.tan * o[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other) -> Dual:
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv,
                        (self.tan - other.tan * (self.val * inv)[..., None]) * inv[..., None])
        o = np.asarray(other, dtype=np.float64)
        return Dual(self.val / o, self.tan / o[..., None])

    def __rtruediv__(self, other) -> Dual:
        o = np.asarray(other, dtype=np.float64)
        inv = 1.0 / self.val
        return Dual(o * inv, -self.tan * (o * inv * inv)[..., None])

    def __pow__(self, p: float) -> Dual:
        if p == 2:
            return self * self
        return Dual(self.val ** p, self.tan * (p * self.val ** (p - 1))[..., None])


def _unary(x: Dual, val, dval) -> Dual:
    return Dual(val, x.tan * np.asarray(dval)[..., None])


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def sqrt(x: Dual) -> Dual:
    v = np.sqrt(x.val)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(v > 0, 0.5 / v, 0.0)
    return _unary(x, v, d)


def exp(x: Dual) -> Dual:
    v = np.exp(x.val)
    return _unary(x, v, v)


def log(x: Dual) -> Dual:
    return _unary(x, np.log(x.val), 1.0 / x.val)


def sin(x: Dual) -> Dual:
    return _unary(x, np.sin(x.val), np.cos(x.val))


def cos(x: Dual) -> Dual:
    return _unary(x, np.cos(x.val), -np.sin(x.val))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Dual) -> Dual:
    s = _sigmoid(x.val)
    return _unary(x, s, s * (1.0 - s))


def softplus(x: Dual) -> Dual:
    """log(1 + e^x), stable for large |x|."""
    v = np.logaddexp(0.0, x.val)
    return _unary(x, v, _sigmoid(x.val))


def where(cond, a: Dual, b: Dual) -> Dual:
    cond = np.asarray(cond, dtype=bool)
    return Dual(np.where(cond, a.val, b.val), np.where(cond[..., None], a.tan, b.tan))


def clip(x: Dual, lo: float, hi: float) -> Dual:
    """Clamp with zero derivative where the bound is active."""
    inside = (x.val > lo) & (x.val < hi)
    return Dual(np.clip(x.val, lo, hi), x.tan * inside[..., None])


def maximum0(x: Dual) -> Dual:
    pos = x.val > 0
    return Dual(np.where(pos, x.val, 0.0), x.tan * pos[..., None])


def stack(items, axis: int = 0) -> Dual:
    axis_t = axis if axis >= 0 else axis - 1
    return Dual(np.stack([i.val for i in items], axis=axis),
                np.stack([i.tan for i in items], axis=axis_t))


def take_along(x: Dual, idx: np.ndarray, axis: int) -> Dual:
    return Dual(np.take_along_axis(x.val, idx, axis=axis),
                np.take_along_axis(x.tan, idx[..., None], axis=axis if axis >= 0 else axis - 1))


def matvec(M: np.ndarray, x: Dual) -> Dual:
    """Apply a constant matrix to the last axis (length 3) of ``x``."""
    return Dual(x.val @ M.T, np.einsum("ij,...jk->...ik", M, x.tan))


def dot3(a: Dual, b: Dual) -> Dual:
    return (a * b).sum(axis=-1)


def cross2(a: Dual, b: Dual) -> Dual:
    """z-component of the cross product of 2D vectors along the last axis."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
