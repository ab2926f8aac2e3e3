"""Small array-level automatic differentiation for node-local kernels.

Two value types share one operator surface so that a kernel written against
plain numpy arrays also runs on them unchanged:

* ``Dual``  forward mode; carries ``K`` tangent directions in a leading axis.
* ``Var``   reverse mode; records a tape and back-propagates a cotangent.

Kernels must restrict themselves to arithmetic operators, ``**`` with a
constant exponent, ``sum(axis=...)``, indexing, and the helpers in this module
(:func:`matmul`, :func:`stack`, :func:`concatenate`, :func:`minimum`,
:func:`where`).  Constant operands are plain numpy arrays or scalars.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Dual",
    "Var",
    "matmul",
    "stack",
    "concatenate",
    "minimum",
    "where",
    "value_of",
    "vjp",
    "jvp",
    "jacobian",
    "tape_order",
]


def value_of(x):
    if isinstance(x, (Dual, Var)):
        return x.value
    return x


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


class Dual:
    """Value with ``K`` tangents; ``tangent.shape == (K,) + value.shape``."""

    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = np.asarray(value, dtype=float)
        tangent = np.asarray(tangent, dtype=float)
        if tangent.shape[1:] != self.value.shape:
            tangent = np.broadcast_to(
                _lift(tangent, self.value.ndim), (tangent.shape[0],) + self.value.shape
            )
        self.tangent = tangent

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def k(self):
        return self.tangent.shape[0]

    def __repr__(self):
        return f"Dual(value={self.value!r}, k={self.k})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            v = self.value + other.value
            return Dual(v, _lift(self.tangent, v.ndim) + _lift(other.tangent, v.ndim))
        v = self.value + other
        return Dual(v, _lift(self.tangent, v.ndim))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            v = self.value * other.value
            t = _lift(self.tangent, v.ndim) * other.value + self.value * _lift(
                other.tangent, v.ndim
            )
            return Dual(v, t)
        v = self.value * other
        return Dual(v, _lift(self.tangent, v.ndim) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            v = self.value / other.value
            t = (
                _lift(self.tangent, v.ndim) - v * _lift(other.tangent, v.ndim)
            ) / other.value
            return Dual(v, t)
        v = self.value / other
        return Dual(v, _lift(self.tangent, v.ndim) / other)

    def __rtruediv__(self, other):
        v = other / self.value
        return Dual(v, -_lift(self.tangent, v.ndim) * (v / self.value))

    def __pow__(self, p):
        if isinstance(p, (Dual, Var)):
            raise TypeError("only constant exponents are supported")
        v = self.value**p
        return Dual(v, self.tangent * (p * self.value ** (p - 1)))

    # structure ----------------------------------------------------------
    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.value[idx], self.tangent[(slice(None),) + idx])

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.value.sum(), self.tangent.reshape(self.k, -1).sum(axis=1))
        axis = axis % self.ndim
        return Dual(self.value.sum(axis=axis), self.tangent.sum(axis=axis + 1))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        v = self.value.reshape(shape)
        return Dual(v, self.tangent.reshape((self.k,) + v.shape))


def _lift(t, ndim):
    """Insert axes after the tangent axis so ``t`` broadcasts against rank ``ndim``."""
    missing = ndim - (t.ndim - 1)
    if missing <= 0:
        return t
    return t.reshape((t.shape[0],) + (1,) * missing + t.shape[1:])


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

_ids = itertools.count()


class Var:
    """Tape node holding a value and the local backward rules to its parents."""

    __array_ufunc__ = None
    __slots__ = ("value", "parents", "grad", "_id")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.grad = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        if isinstance(other, Var):
            shp_a, shp_b = self.value.shape, other.value.shape
            return Var(
                self.value + other.value,
                (
                    (self, lambda g: _unbroadcast(g, shp_a)),
                    (other, lambda g: _unbroadcast(g, shp_b)),
                ),
            )
        shp = self.value.shape
        return Var(self.value + other, ((self, lambda g: _unbroadcast(g, shp)),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        if isinstance(other, Var):
            shp_a, shp_b = self.value.shape, other.value.shape
            return Var(
                self.value - other.value,
                (
                    (self, lambda g: _unbroadcast(g, shp_a)),
                    (other, lambda g: -_unbroadcast(g, shp_b)),
                ),
            )
        shp = self.value.shape
        return Var(self.value - other, ((self, lambda g: _unbroadcast(g, shp)),))

    def __rsub__(self, other):
        shp = self.value.shape
        return Var(other - self.value, ((self, lambda g: -_unbroadcast(g, shp)),))

    def __mul__(self, other):
        a = self.value
        if isinstance(other, Var):
            b = other.value
            return Var(
                a * b,
                (
                    (self, lambda g: _unbroadcast(g * b, a.shape)),
                    (other, lambda g: _unbroadcast(g * a, b.shape)),
                ),
            )
        return Var(a * other, ((self, lambda g: _unbroadcast(g * other, a.shape)),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a = self.value
        if isinstance(other, Var):
            b = other.value
            out = a / b
            return Var(
                out,
                (
                    (self, lambda g: _unbroadcast(g / b, a.shape)),
                    (other, lambda g: _unbroadcast(-g * out / b, b.shape)),
                ),
            )
        return Var(a / other, ((self, lambda g: _unbroadcast(g / other, a.shape)),))

    def __rtruediv__(self, other):
        a = self.value
        out = other / a
        return Var(out, ((self, lambda g: _unbroadcast(-g * out / a, a.shape)),))

    def __pow__(self, p):
        if isinstance(p, (Dual, Var)):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Var(a**p, ((self, lambda g: g * (p * a ** (p - 1))),))

    def __getitem__(self, idx):
        shp = self.value.shape

        fancy = _is_fancy(idx)

        def back(g):
            out = np.zeros(shp)
            if fancy:
                np.add.at(out, idx, g)
            else:
                out[idx] += g
            return out

        return Var(self.value[idx], ((self, back),))

    def sum(self, axis=None):
        shp = self.value.shape
        if axis is None:
            return Var(self.value.sum(), ((self, lambda g: np.full(shp, g)),))
        axis = axis % len(shp)
        return Var(
            self.value.sum(axis=axis),
            ((self, lambda g: np.broadcast_to(np.expand_dims(g, axis), shp)),),
        )

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        shp = self.value.shape
        return Var(self.value.reshape(shape), ((self, lambda g: g.reshape(shp)),))

    def backward(self, seed=None, order=None):
        """Accumulate ``d(seed . self)/d(leaf)`` into ``leaf.grad`` for all leaves.

        ``order`` may be a cached :func:`tape_order` of this node to skip the
        topological sort when the same tape is swept repeatedly.
        """
        if seed is None:
            seed = np.ones_like(self.value)
        if order is None:
            order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=float)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, rule in node.parents:
                contrib = rule(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def tape_order(root):
    """Reverse topological order of the tape below ``root``."""
    return _toposort(root)


def _toposort(root):
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append(parent)
    # a node is always created after its parents
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def matmul(A, x):
    """``A @ x`` for a constant matrix ``A``."""
    if isinstance(x, Var):
        shp = x.value.shape
        At = A.T
        return Var(A @ x.value, ((x, lambda g: _unbroadcast(At @ g, shp)),))
    if isinstance(x, Dual):
        return Dual(A @ x.value, A @ x.tangent)
    return A @ x


def stack(items, axis=0):
    if any(isinstance(i, Var) for i in items):
        items = [i if isinstance(i, Var) else Var(i) for i in items]
        values = [i.value for i in items]
        out = np.stack(values, axis=axis)
        ax = axis % out.ndim
        parents = tuple(
            (item, (lambda g, k=k: np.take(g, k, axis=ax))) for k, item in enumerate(items)
        )
        return Var(out, parents)
    if any(isinstance(i, Dual) for i in items):
        k = next(i.k for i in items if isinstance(i, Dual))
        items = [i if isinstance(i, Dual) else Dual(i, np.zeros((k,) + np.shape(i))) for i in items]
        out = np.stack([i.value for i in items], axis=axis)
        ax = axis % out.ndim
        return Dual(out, np.stack([i.tangent for i in items], axis=ax + 1))
    return np.stack(items, axis=axis)


def concatenate(items, axis=0):
    if any(isinstance(i, Var) for i in items):
        items = [i if isinstance(i, Var) else Var(i) for i in items]
        out = np.concatenate([i.value for i in items], axis=axis)
        ax = axis % out.ndim
        bounds = np.cumsum([0] + [i.value.shape[ax] for i in items])
        parents = []
        for k, item in enumerate(items):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(bounds[k], bounds[k + 1])
            sl = tuple(sl)
            parents.append((item, (lambda g, sl=sl: g[sl])))
        return Var(out, tuple(parents))
    if any(isinstance(i, Dual) for i in items):
        k = next(i.k for i in items if isinstance(i, Dual))
        items = [i if isinstance(i, Dual) else Dual(i, np.zeros((k,) + np.shape(i))) for i in items]
        out = np.concatenate([i.value for i in items], axis=axis)
        ax = axis % out.ndim
        return Dual(out, np.concatenate([i.tangent for i in items], axis=ax + 1))
    return np.concatenate(items, axis=axis)


def minimum(x, cap):
    """Elementwise ``min(x, cap)`` for a constant ``cap``; derivative follows the branch taken."""
    if isinstance(x, Var):
        keep = x.value <= cap
        shp = x.value.shape
        return Var(np.minimum(x.value, cap), ((x, lambda g: _unbroadcast(g * keep, shp)),))
    if isinstance(x, Dual):
        keep = x.value <= cap
        return Dual(np.minimum(x.value, cap), x.tangent * keep)
    return np.minimum(x, cap)


def where(mask, a, b):
    """``np.where`` with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if isinstance(a, Var) or isinstance(b, Var):
        out = np.where(mask, value_of(a), value_of(b))
        parents = []
        if isinstance(a, Var):
            sa = a.value.shape
            parents.append((a, lambda g: _unbroadcast(np.where(mask, g, 0.0), sa)))
        if isinstance(b, Var):
            sb = b.value.shape
            parents.append((b, lambda g: _unbroadcast(np.where(mask, 0.0, g), sb)))
        return Var(out, tuple(parents))
    if isinstance(a, Dual) or isinstance(b, Dual):
        k = a.k if isinstance(a, Dual) else b.k
        out = np.where(mask, value_of(a), value_of(b))
        ta = _lift(a.tangent, out.ndim) if isinstance(a, Dual) else np.zeros((k,) + (1,) * out.ndim)
        tb = _lift(b.tangent, out.ndim) if isinstance(b, Dual) else np.zeros((k,) + (1,) * out.ndim)
        return Dual(out, np.where(mask, ta, tb))
    return np.where(mask, a, b)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def vjp(fn, primals, cotangent):
    """Return ``(fn(*primals), grads)`` with ``grads[i] = J_i^T cotangent``.

    ``None`` entries in ``primals`` are passed through untouched and get a
    ``None`` gradient.
    """
    leaves = [None if p is None else Var(p) for p in primals]
    out = fn(*leaves)
    if not isinstance(out, Var):
        # output does not depend on any input
        return np.asarray(out), tuple(
            None if p is None else np.zeros(np.shape(p)) for p in primals
        )
    out.backward(cotangent)
    grads = []
    for p, leaf in zip(primals, leaves):
        if leaf is None:
            grads.append(None)
        elif leaf.grad is None:
            grads.append(np.zeros(np.shape(p)))
        else:
            grads.append(np.asarray(leaf.grad).reshape(np.shape(p)))
    return out.value, tuple(grads)


def jvp(fn, primals, tangents):
    """Return ``(fn(*primals), J . tangents)`` for a single tangent direction."""
    args = []
    for p, t in zip(primals, tangents):
        if p is None:
            args.append(None)
        elif t is None:
            args.append(np.asarray(p, dtype=float))
        else:
            args.append(Dual(p, np.asarray(t, dtype=float)[None]))
    out = fn(*args)
    if not isinstance(out, Dual):
        out = np.asarray(out)
        return out, np.zeros_like(out, dtype=float)
    return out.value, out.tangent[0]


def jacobian(fn, x, *args):
    """Full Jacobian of ``fn`` w.r.t. ``x`` of shape ``(M, n)`` by forward mode.

    Returns an array ``J`` with ``J[j, k, i] = d out[j, i] / d x[k, i]`` for
    column-wise independent kernels (one column per lattice node), obtained
    from ``M`` simultaneous tangent directions.
    """
    x = np.asarray(x, dtype=float)
    m = x.shape[0]
    seed = np.zeros((m,) + x.shape)
    seed[np.arange(m), np.arange(m)] = 1.0
    out = fn(Dual(x, seed), *args)
    # out.tangent[k, j, i] = d out_j / d x_k at column i
    return np.transpose(out.tangent, (1, 0, 2))
