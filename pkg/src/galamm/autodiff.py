"""Forward-mode automatic differentiation with array-valued dual numbers.

A :class:`Dual` holds an array of truncated Taylor jets. Every element
carries a ``(P, Q)`` block of coefficients::

    c[0, 0]   value
    c[a, 0]   derivative along first-order direction a   (a = 1..P-1)
    c[0, b]   derivative along second seed direction b   (b = 1..Q-1)
    c[a, b]   mixed second derivative along (a, b)

With ``Q == 1`` this is an ordinary first-order dual number with ``P - 1``
tangent directions. With ``Q == 2`` the jet is a dual number over dual
numbers: seeding all parameters in the first slot and a single parameter j
in the second slot yields the full gradient and the j-th Hessian column in
one pass. ``P == Q == 1`` degenerates to plain reals, which lets the same
code path run undifferentiated.

All products satisfy ``e_a e_a' = 0`` and ``f_b f_b' = 0``; only the
mixed ``e_a f_b`` terms survive.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "NonDifferentiableError",
    "abs",
    "exp",
    "expit",
    "grad",
    "hessian",
    "hessian_diagonal",
    "log",
    "log1p",
    "softplus",
    "sqrt",
    "spmatmul",
    "value",
]

_builtin_abs = abs


class NonDifferentiableError(ValueError):
    """Raised when a primitive is evaluated where it has no derivative."""


class Dual:
    """Array of second-order-capable dual numbers.

    Parameters
    ----------
    c : ndarray, shape ``(*shape, P, Q)``
        Jet coefficients, see module docstring.
    """

    __slots__ = ("c",)
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, c):
        c = np.asarray(c, dtype=float)
        if c.ndim < 2:
            raise ValueError("jet array needs trailing (P, Q) axes")
        self.c = c

    # -- construction -------------------------------------------------------

    @classmethod
    def constant(cls, x, P=1, Q=1):
        x = np.asarray(x, dtype=float)
        c = np.zeros(x.shape + (P, Q))
        c[..., 0, 0] = x
        return cls(c)

    @classmethod
    def seed(cls, x, first=None, second=None):
        """Seed a parameter vector.

        ``first`` lists the indices of ``x`` that receive first-order
        directions (default: all), ``second`` the indices that receive the
        second seed direction (default: none).
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("seed expects a vector")
        first = np.arange(x.size) if first is None else np.asarray(first, dtype=int)
        second = np.empty(0, dtype=int) if second is None else np.atleast_1d(np.asarray(second, dtype=int))
        P, Q = first.size + 1, second.size + 1
        c = np.zeros((x.size, P, Q))
        c[:, 0, 0] = x
        c[first, np.arange(1, P), 0] = 1.0
        c[second, 0, np.arange(1, Q)] = 1.0
        return cls(c)

    @staticmethod
    def like(template, x):
        """Lift ``x`` to a jet with the same ``(P, Q)`` as ``template``."""
        if isinstance(x, Dual):
            return x
        if isinstance(template, Dual):
            return Dual.constant(x, *template.PQ)
        return Dual.constant(x)

    # -- shape --------------------------------------------------------------

    @property
    def shape(self):
        return self.c.shape[:-2]

    @property
    def ndim(self):
        return self.c.ndim - 2

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def PQ(self):
        return self.c.shape[-2:]

    @property
    def val(self):
        return self.c[..., 0, 0]

    @property
    def d1(self):
        """First-order part, shape ``(*shape, P-1)``."""
        return self.c[..., 1:, 0]

    @property
    def d2(self):
        """Mixed second-order part, shape ``(*shape, P-1, Q-1)``."""
        return self.c[..., 1:, 1:]

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            raise IndexError("Ellipsis indexing is not supported on Dual")
        return Dual(self.c[idx])

    def __setitem__(self, idx, other):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if isinstance(other, Dual):
            self.c[idx] = other.c
        else:
            self.c[idx] = 0.0
            self.c[idx + (0, 0)] = other

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(self.c.reshape(tuple(shape) + self.PQ))

    def copy(self):
        return Dual(self.c.copy())

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError("transpose defined for 2-d Dual only")
        return Dual(self.c.transpose(1, 0, 2, 3))

    def __repr__(self):
        return f"Dual(val={self.val!r}, PQ={self.PQ})"

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Dual):
            if other.PQ != self.PQ:
                raise ValueError(f"jet shapes differ: {self.PQ} vs {other.PQ}")
            return other.c
        return None

    def __add__(self, other):
        oc = self._coerce(other)
        if oc is not None:
            return Dual(self.c + oc)
        return _add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        oc = self._coerce(other)
        if oc is not None:
            return Dual(self.c - oc)
        return _add_const(self, -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return _add_const(-self, other)

    def __neg__(self):
        return Dual(-self.c)

    def __pos__(self):
        return self

    def __mul__(self, other):
        oc = self._coerce(other)
        if oc is not None:
            return Dual(_jet_mul(self.c, oc))
        k = np.asarray(other, dtype=float)
        return Dual(self.c * k[..., None, None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * reciprocal(other)
        k = np.asarray(other, dtype=float)
        return Dual(self.c / k[..., None, None])

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __pow__(self, k):
        if isinstance(k, Dual):
            return exp(log(self) * k)
        k = float(k)
        if k == 2.0:
            return self * self
        v = self.val
        if k != int(k) and np.any(v <= 0):
            raise NonDifferentiableError("non-integer power of a non-positive value")
        return _unary(self, v**k, k * v ** (k - 1), k * (k - 1) * v ** (k - 2))

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.c.reshape((-1,) + self.PQ).sum(axis=0))
        axis = axis % self.ndim if self.ndim else axis
        return Dual(self.c.sum(axis=axis))

    def dot(self, other):
        return (self * other).sum()


# -- helpers ----------------------------------------------------------------


def _add_const(d, k):
    k = np.asarray(k, dtype=float)
    shape = np.broadcast_shapes(d.shape, k.shape)
    c = np.broadcast_to(d.c, shape + d.PQ).copy()
    c[..., 0, 0] += k
    return Dual(c)


def _jet_mul(a, b):
    P, Q = a.shape[-2:]
    if P == 1 and Q == 1:
        return a * b
    a0 = a[..., :1, :1]
    b0 = b[..., :1, :1]
    c = a * b0
    if c.shape == b.shape:
        c += a0 * b
    else:
        c = c + a0 * b
    c[..., 0, 0] = a[..., 0, 0] * b[..., 0, 0]
    if P > 1 and Q > 1:
        c[..., 1:, 1:] += a[..., 1:, :1] * b[..., :1, 1:] + b[..., 1:, :1] * a[..., :1, 1:]
    return c


def _unary(d, f, df, ddf):
    """Apply a scalar function given its value and derivatives at ``d.val``."""
    c = d.c * np.asarray(df)[..., None, None]
    c[..., 0, 0] = f
    P, Q = d.PQ
    if P > 1 and Q > 1:
        c[..., 1:, 1:] += np.asarray(ddf)[..., None, None] * d.c[..., 1:, :1] * d.c[..., :1, 1:]
    return Dual(c)


def _matmul(a, b):
    """Matrix product where at most one operand is a Dual.

    Dense or scipy-sparse constant matrices multiply the jet coefficients
    directly; two Duals fall back to elementwise products and sums.
    """
    if isinstance(a, Dual) and isinstance(b, Dual):
        if b.ndim == 1:
            return (a * b[None, :]).sum(axis=1)
        return Dual(_jet_mul(a.c[:, :, None], b.c[None, :, :]).sum(axis=1))
    if isinstance(b, Dual):
        return spmatmul(a, b)
    # Dual @ constant
    a_c = a.c
    bm = np.asarray(b, dtype=float)
    if a.ndim == 1:
        return Dual(np.einsum("kpq,k...->...pq", a_c, bm))
    return Dual(np.einsum("ikpq,k...->i...pq", a_c, bm))


def spmatmul(M, d):
    """Compute ``M @ d`` for a constant (dense or sparse) matrix ``M``."""
    shape = d.shape
    flat = d.c.reshape(shape[0], int(np.prod(d.c.shape[1:])))
    out = M @ flat
    out = np.asarray(out)
    return Dual(out.reshape((M.shape[0],) + shape[1:] + d.PQ))


def value(x):
    """Value part of a Dual, or ``x`` itself for plain numbers."""
    return x.val if isinstance(x, Dual) else x


# -- primitives ---------------------------------------------------------------


def _expit_plain(x):
    # branch-free and overflow-safe for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _softplus_plain(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    e = np.exp(x.val)
    return _unary(x, e, e, e)


def log(x):
    if not isinstance(x, Dual):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise NonDifferentiableError("log of a non-positive value")
        return np.log(x)
    v = x.val
    if np.any(v <= 0):
        raise NonDifferentiableError("log of a non-positive value")
    return _unary(x, np.log(v), 1.0 / v, -1.0 / v**2)


def log1p(x):
    if not isinstance(x, Dual):
        x = np.asarray(x, dtype=float)
        if np.any(x <= -1):
            raise NonDifferentiableError("log1p at or below -1")
        return np.log1p(x)
    v = x.val
    if np.any(v <= -1):
        raise NonDifferentiableError("log1p at or below -1")
    return _unary(x, np.log1p(v), 1.0 / (1.0 + v), -1.0 / (1.0 + v) ** 2)


def sqrt(x):
    if not isinstance(x, Dual):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise NonDifferentiableError("sqrt of a negative value")
        return np.sqrt(x)
    v = x.val
    if np.any(v <= 0):
        raise NonDifferentiableError("sqrt is not differentiable at or below 0")
    s = np.sqrt(v)
    return _unary(x, s, 0.5 / s, -0.25 / (s * v))


def expit(x):
    if not isinstance(x, Dual):
        return _expit_plain(x)
    s = _expit_plain(x.val)
    ds = s * (1.0 - s)
    return _unary(x, s, ds, ds * (1.0 - 2.0 * s))


def softplus(x):
    """``log(1 + exp(x))`` evaluated without overflow."""
    if not isinstance(x, Dual):
        return _softplus_plain(x)
    s = _expit_plain(x.val)
    return _unary(x, _softplus_plain(x.val), s, s * (1.0 - s))


def abs(x):
    if not isinstance(x, Dual):
        return np.abs(x)
    v = x.val
    if np.any(v == 0):
        raise NonDifferentiableError("abs is not differentiable at 0")
    sg = np.sign(v)
    return _unary(x, np.abs(v), sg, np.zeros_like(v))


def reciprocal(x):
    if not isinstance(x, Dual):
        return 1.0 / np.asarray(x, dtype=float)
    v = x.val
    if np.any(v == 0):
        raise ZeroDivisionError("division by a jet with zero value part")
    r = 1.0 / v
    return _unary(x, r, -r * r, 2.0 * r * r * r)


# -- drivers ------------------------------------------------------------------


def grad(f, x):
    """Gradient of a scalar function by one forward pass.

    ``f`` receives a 1-d :class:`Dual` and must return a scalar Dual.
    """
    x = np.asarray(x, dtype=float)
    out = f(Dual.seed(x))
    if not isinstance(out, Dual):
        return np.zeros_like(x)
    return np.array(out.c.reshape(-1)[1 : x.size + 1] if out.ndim == 0 else out.d1)


def hessian(f, x, which=None):
    """Hessian of a scalar function by nested forward passes.

    One pass per column; each pass seeds every coordinate in ``which``
    (default all) as a first-order direction and one coordinate as the
    second direction. The result is symmetrised by averaging the (i, j)
    and (j, i) entries.
    """
    x = np.asarray(x, dtype=float)
    which = np.arange(x.size) if which is None else np.asarray(which, dtype=int)
    k = which.size
    H = np.zeros((k, k))
    for col, j in enumerate(which):
        out = f(Dual.seed(x, first=which, second=[j]))
        H[:, col] = out.c[1:, 1]
    return 0.5 * (H + H.T)


def hessian_diagonal(f, x, which=None):
    """Diagonal second derivatives; one two-direction pass per coordinate."""
    x = np.asarray(x, dtype=float)
    which = np.arange(x.size) if which is None else np.asarray(which, dtype=int)
    out = np.empty(which.size)
    for k, j in enumerate(which):
        out[k] = f(Dual.seed(x, first=[j], second=[j])).c[1, 1]
    return out
