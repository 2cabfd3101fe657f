"""Sparse symmetric LDL' factorisation generic over reals and dual numbers.

The numeric kernels come from the compiled ``_ldl_core`` extension when it
is importable and from the numpy fallback otherwise. Setting the
environment variable ``GALAMM_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..autodiff import Dual
from .amd import amd_order
from .symbolic import SymbolicFactorization, analyze, etree

__all__ = [
    "BACKEND",
    "CSCMatrix",
    "NotPositiveDefiniteError",
    "NumericFactorization",
    "PIVOT_TOL",
    "SymbolicFactorization",
    "amd_order",
    "analyze",
    "etree",
    "factorize",
    "get_backend",
    "logdet_D",
    "solve",
]

PIVOT_TOL = 1e-12


def _load_backend(force_python=False):
    if not force_python:
        try:
            from . import _ldl_core as core

            return "cython", core
        except ImportError:
            pass
    from . import _fallback as core

    return "python", core


BACKEND, _core = _load_backend(os.environ.get("GALAMM_PURE_PYTHON", "") not in ("", "0"))


def get_backend(name=None):
    """Return ``(name, module)``; ``name`` in {None, "cython", "python"}."""
    if name is None:
        return BACKEND, _core
    if name == "python":
        return _load_backend(True)
    got = _load_backend(False)
    if got[0] != name:
        raise ImportError(f"backend {name!r} is not available")
    return got


class NotPositiveDefiniteError(ArithmeticError):
    """The matrix handed to the factorisation is not (numerically) positive definite."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"non-positive pivot at column {column}")


@dataclass(frozen=True)
class CSCMatrix:
    """Compressed sparse column matrix with a fixed pattern.

    ``data`` may hold plain values (shape ``(nnz,)``) or jets (shape
    ``(nnz, P, Q)``).
    """

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        m, n = self.shape
        if self.indptr.size != n + 1 or self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise ValueError("inconsistent column pointers")
        if self.data.shape[0] != self.indices.size:
            raise ValueError("data length does not match the pattern")
        for j in range(n):
            rows = self.indices[self.indptr[j] : self.indptr[j + 1]]
            if rows.size and (np.any(np.diff(rows) <= 0) or rows[0] < 0 or rows[-1] >= m):
                raise ValueError(f"row indices in column {j} unsorted, duplicated or out of range")

    @classmethod
    def from_scipy(cls, A):
        A = sp.csc_matrix(A, copy=True)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape, A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(float))

    def to_scipy(self):
        data = self.data if self.data.ndim == 1 else self.data[:, 0, 0]
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)

    @property
    def nnz(self):
        return int(self.indices.size)

    def with_data(self, data):
        return CSCMatrix(self.shape, self.indptr, self.indices, np.asarray(data))


def _as_jets(x):
    """Return (flat jet array (m, C), P, Q, is_dual)."""
    if isinstance(x, Dual):
        P, Q = x.PQ
        return np.ascontiguousarray(x.c.reshape(x.shape[0], P * Q)), P, Q, True
    x = np.asarray(x, dtype=float)
    return np.ascontiguousarray(x.reshape(-1, 1)), 1, 1, False


@dataclass
class NumericFactorization:
    """``L D L' = P A P'`` for the positive definite matrix ``A``.

    ``A`` here is the negated Hessian of the integrand; values of L and D
    may carry jets.
    """

    symbolic: SymbolicFactorization
    Lx: np.ndarray
    D: np.ndarray
    Dinv: np.ndarray
    P: int
    Q: int
    is_dual: bool
    backend: str = BACKEND

    @property
    def d(self):
        """Diagonal of D as plain values."""
        return self.D[:, 0]

    def D_dual(self):
        if self.is_dual:
            return Dual(self.D.reshape(-1, self.P, self.Q).copy())
        return self.D[:, 0].copy()

    def L_dense(self):
        s = self.symbolic
        L = np.eye(s.n)
        cols = np.repeat(np.arange(s.n), np.diff(s.Lp))
        L[s.Li, cols] = self.Lx[:, 0]
        return L

    def logdet(self):
        """``sum(log d_ii)``, a Dual when the factorisation carries jets."""
        d = self.D_dual()
        if self.is_dual:
            from ..autodiff import log

            return log(d).sum()
        return float(np.sum(np.log(d)))

    def solve(self, b):
        """Solve ``A x = b``; ``b`` may be plain, a Dual, or a 2-d plain array."""
        s = self.symbolic
        _, core = get_backend(self.backend)
        if isinstance(b, Dual):
            if b.PQ != (self.P, self.Q):
                b = Dual(np.broadcast_to(b.c, b.shape + (self.P, self.Q)).copy()) if b.PQ == (1, 1) else b
            X, P, Q, _ = _as_jets(b)
            X = np.ascontiguousarray(X[s.perm])
        else:
            b = np.asarray(b, dtype=float)
            if b.ndim == 2:
                return np.column_stack([self.solve(b[:, j]) for j in range(b.shape[1])]) if b.shape[1] else b.copy()
            if self.is_dual:
                return self.solve(Dual.constant(b, self.P, self.Q))
            X = np.ascontiguousarray(b[s.perm].reshape(-1, 1))
            P = Q = 1
        if (P, Q) != (self.P, self.Q):
            raise ValueError("right-hand side jet shape differs from the factorisation")
        if np.any(self.D[:, 0] == 0):
            raise ZeroDivisionError("zero entry in D")
        core.lsolve(s.n, P, Q, s.Lp, s.Li, self.Lx, X)
        core.dsolve(s.n, P, Q, self.Dinv, X)
        core.ltsolve(s.n, P, Q, s.Lp, s.Li, self.Lx, X)
        out = np.empty_like(X)
        out[s.perm] = X
        if isinstance(b, Dual):
            return Dual(out.reshape(s.n, P, Q))
        return out[:, 0]


def factorize(symbolic, values, backend=None, pivot_tol=PIVOT_TOL):
    """Numeric LDL' of the matrix whose permuted-upper CSC values are ``values``.

    ``values`` follows ``symbolic.Ap``/``symbolic.Ai`` ordering; use
    :meth:`SymbolicFactorization.permuted_upper` to convert a scipy matrix.
    Raises :class:`NotPositiveDefiniteError` for a pivot ``d_kk <= 0`` or
    ``d_kk <= pivot_tol * max_j d_jj``.
    """
    name, core = get_backend(backend)
    if isinstance(values, CSCMatrix):
        values = symbolic.permuted_upper(values.to_scipy())
    elif sp.issparse(values):
        values = symbolic.permuted_upper(values)
    Ax, P, Q, is_dual = _as_jets(values)
    s = symbolic
    if Ax.shape[0] != s.nnz_A:
        raise ValueError(f"expected {s.nnz_A} values, got {Ax.shape[0]}")
    C = P * Q
    Lx = np.zeros((s.Li.size, C))
    D = np.zeros((s.n, C))
    Dinv = np.zeros((s.n, C))
    status = core.ldl_numeric(s.n, P, Q, s.Ap, s.Ai, Ax, s.Lp, s.Rp, s.Ri, s.Rpos, s.Li, Lx, D, Dinv)
    if status >= 0:
        raise NotPositiveDefiniteError(int(status))
    if s.n:
        dmax = D[:, 0].max()
        bad = np.flatnonzero(D[:, 0] <= pivot_tol * dmax)
        if bad.size:
            raise NotPositiveDefiniteError(int(bad[0]), f"pivot below tolerance at column {bad[0]}")
    return NumericFactorization(s, Lx, D, Dinv, P, Q, is_dual, name)


def solve(factorization, b):
    return factorization.solve(b)


def logdet_D(factorization):
    if np.any(factorization.d <= 0):
        raise ValueError("non-positive entry in D")
    return factorization.logdet()
