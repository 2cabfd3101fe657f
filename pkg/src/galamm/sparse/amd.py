"""Approximate minimum degree ordering.

Quotient-graph elimination with the approximate external degree bound
and aggressive element absorption. Supervariable detection and dense-row
handling are left out: the systems met in model fitting have at most a
few thousand rows and the quotient graph alone keeps the work small.
Ties are broken by the smaller original degree and then by the lowest
original index, so the ordering is a pure function of the pattern.
"""

from __future__ import annotations

import heapq

import numpy as np
import scipy.sparse as sp

__all__ = ["amd_order", "symmetric_pattern"]


def symmetric_pattern(A):
    """Adjacency lists (no diagonal) of the symmetrised pattern of ``A``."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"AMD needs a square pattern, got shape {A.shape}")
    n = A.shape[0]
    B = sp.csr_matrix((np.ones(A.nnz), A.indices, A.indptr), shape=A.shape)
    B = (B + B.T).tocsr()
    B.sum_duplicates()
    B.sort_indices()
    adj = []
    for i in range(n):
        row = B.indices[B.indptr[i] : B.indptr[i + 1]]
        adj.append(set(int(j) for j in row if j != i))
    return adj


def amd_order(A):
    """Return a fill-reducing permutation ``perm`` (new position -> old index).

    ``A`` is any square matrix or pattern accepted by ``scipy.sparse``; only
    its nonzero structure is used.
    """
    adj = symmetric_pattern(A)
    n = len(adj)
    var_adj = [set(a) for a in adj]  # A_i: uneliminated neighbours
    elem_adj = [set() for _ in range(n)]  # E_i: adjacent elements
    elem_vars = {}  # L_e for live elements
    degree = [len(a) for a in var_adj]
    eliminated = np.zeros(n, dtype=bool)
    deg0 = [len(a) for a in adj]
    heap = [(degree[i], deg0[i], i) for i in range(n)]
    heapq.heapify(heap)
    perm = []
    n_left = n

    while heap:
        d, _, p = heapq.heappop(heap)
        if eliminated[p] or d != degree[p]:
            continue
        eliminated[p] = True
        perm.append(p)
        n_left -= 1

        # new element L_p from A_p and the elements adjacent to p
        Lp = set(var_adj[p])
        for e in elem_adj[p]:
            Lp |= elem_vars.pop(e)
        Lp.discard(p)
        Lp = {v for v in Lp if not eliminated[v]}
        absorbed = elem_adj[p]
        elem_vars[p] = Lp
        var_adj[p] = set()
        elem_adj[p] = set()

        # |L_e \ L_p| for elements adjacent to some variable of L_p
        w = {}
        for i in Lp:
            E_i = elem_adj[i]
            E_i -= absorbed
            for e in E_i:
                if e not in w:
                    w[e] = len(elem_vars[e])
                w[e] -= 1
            E_i.add(p)
            var_adj[i] -= Lp
            var_adj[i].discard(p)

        # aggressive absorption: elements entirely covered by L_p
        dead = [e for e, we in w.items() if we == 0]
        for e in dead:
            for v in elem_vars.pop(e):
                elem_adj[v].discard(e)
            del w[e]

        size_Lp = len(Lp)
        for i in sorted(Lp):
            ext = size_Lp - 1
            for e in elem_adj[i]:
                if e != p:
                    ext += w.get(e, len(elem_vars[e]))
            ext += len(var_adj[i])
            dnew = min(n_left - 1, degree[i] + size_Lp - 1, ext)
            dnew = max(dnew, 0)
            degree[i] = dnew
            heapq.heappush(heap, (dnew, deg0[i], i))

    return np.asarray(perm, dtype=np.int64)
