"""Symbolic LDL' analysis: ordering, elimination tree and the pattern of L."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .amd import amd_order

__all__ = ["SymbolicFactorization", "analyze", "etree"]

_I = np.int32


def etree(Ap, Ai, n):
    """Elimination tree of a matrix given by its upper-triangular CSC pattern."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = int(Ai[p])
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@dataclass(frozen=True)
class SymbolicFactorization:
    """Value-independent part of the factorisation, shared across refits.

    ``perm[new] = old``. The matrix handed to the numeric phase is the
    upper triangle of ``P A P'`` in CSC order (``Ap``, ``Ai``).
    """

    n: int
    perm: np.ndarray
    iperm: np.ndarray
    parent: np.ndarray
    Ap: np.ndarray
    Ai: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Rp: np.ndarray  # row patterns of L: row k has columns Ri[Rp[k]:Rp[k+1]]
    Ri: np.ndarray
    Rpos: np.ndarray  # slot in Li/Lx of each row-pattern entry

    @property
    def nnz_L(self):
        """Stored entries of L including the unit diagonal."""
        return int(self.Li.size) + self.n

    @property
    def nnz_A(self):
        return int(self.Ai.size)

    def position(self, rows, cols):
        """Slots in the permuted upper CSC data of original entries (rows, cols)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        pr, pc = self.iperm[rows], self.iperm[cols]
        r = np.minimum(pr, pc)
        c = np.maximum(pr, pc)
        key = c * self.n + r
        col_of = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.Ap))
        keys = col_of * self.n + self.Ai
        pos = np.searchsorted(keys, key)
        if np.any(pos >= keys.size) or np.any(keys[np.minimum(pos, keys.size - 1)] != key):
            raise KeyError("entry outside the analysed pattern")
        return pos

    def permuted_upper(self, A):
        """Values of a scipy matrix ``A`` in permuted upper CSC order."""
        A = sp.coo_matrix(A)
        keep = A.row <= A.col
        out = np.zeros(self.nnz_A)
        np.add.at(out, self.position(A.row[keep], A.col[keep]), A.data[keep])
        return out


def analyze(A, perm=None):
    """Symbolic analysis of the symmetric pattern of ``A``.

    ``perm`` defaults to the approximate minimum degree ordering.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    pat = sp.csc_matrix((np.ones(A.nnz), A.indices, A.indptr), shape=A.shape)
    pat = pat + pat.T + sp.identity(n, format="csc")
    if perm is None:
        perm = amd_order(pat)
    perm = np.asarray(perm, dtype=np.int64)
    if perm.size != n or np.any(np.sort(perm) != np.arange(n)):
        raise ValueError("ordering is not a permutation")
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)
    C = sp.triu(pat[perm][:, perm], format="csc")
    C.sort_indices()
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    parent = etree(Ap, Ai, n)

    # row patterns of L by walking the tree from each nonzero of column k
    flag = np.full(n, -1, dtype=np.int64)
    rows = []
    for k in range(n):
        flag[k] = k
        pat_k = []
        for p in range(Ap[k], Ap[k + 1]):
            i = int(Ai[p])
            while i < k and flag[i] != k:
                pat_k.append(i)
                flag[i] = k
                i = int(parent[i])
        pat_k.sort()
        rows.append(pat_k)

    counts = np.zeros(n, dtype=np.int64)
    for pat_k in rows:
        for i in pat_k:
            counts[i] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = np.empty(Lp[-1], dtype=np.int64)
    Rp = np.zeros(n + 1, dtype=np.int64)
    Rp[1:] = np.cumsum([len(r) for r in rows])
    Ri = np.empty(Rp[-1], dtype=np.int64)
    Rpos = np.empty(Rp[-1], dtype=np.int64)
    fill = Lp[:-1].copy()
    t = 0
    for k, pat_k in enumerate(rows):
        for i in pat_k:
            Li[fill[i]] = k
            Ri[t] = i
            Rpos[t] = fill[i]
            fill[i] += 1
            t += 1

    def i32(a):
        return np.ascontiguousarray(a, dtype=_I)

    return SymbolicFactorization(
        n=n,
        perm=perm,
        iperm=iperm,
        parent=parent,
        Ap=i32(Ap),
        Ai=i32(Ai),
        Lp=i32(Lp),
        Li=i32(Li),
        Rp=i32(Rp),
        Ri=i32(Ri),
        Rpos=i32(Rpos),
    )
