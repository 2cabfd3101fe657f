"""Pure numpy implementation of the jet LDL' kernels.

Same entry points and in-place semantics as the compiled ``_ldl_core``.
The factorisation is left-looking: column ``j`` of L is formed with one
vectorised gather, jet product and scatter-add over every earlier column
that touches it. The gather/scatter plans depend only on the symbolic
analysis and are cached per pattern.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import _jet_mul

_PLANS = {}


def _recip(v, P, Q):
    v = v.reshape(-1, P, Q)
    f0 = 1.0 / v[:, 0, 0]
    out = v * (-f0 * f0)[:, None, None]
    out[:, 0, 0] = f0
    if P > 1 and Q > 1:
        out[:, 1:, 1:] += (2.0 * f0**3)[:, None, None] * v[:, 1:, :1] * v[:, :1, 1:]
    return out.reshape(v.shape[0], P * Q)


def _mul(x, y, P, Q):
    m = x.shape[0]
    return _jet_mul(x.reshape(m, P, Q), y.reshape(m, P, Q)).reshape(m, P * Q)


def _plan(n, Ap, Ai, Lp, Rp, Ri, Rpos, Li):
    key = (n, Ap.tobytes(), Ai.tobytes(), Lp.tobytes(), Li.tobytes())
    plan = _PLANS.get(key)
    if plan is not None:
        return plan
    # slot of L[i, j] for every stored entry, indexed by (column j, row i)
    plan = []
    for j in range(n):
        lo, hi = Lp[j], Lp[j + 1]
        rows_j = Li[lo:hi]
        where = {int(r): lo + t for t, r in enumerate(rows_j)}
        src, dst, mult = [], [], []
        # earlier columns k with L[j, k] != 0 are the row pattern of j
        for t in range(Rp[j], Rp[j + 1]):
            k = int(Ri[t])
            pjk = int(Rpos[t])
            for p in range(pjk + 1, Lp[k + 1]):
                src.append(p)
                dst.append(where[int(Li[p])])
                mult.append(t)
        plan.append(
            (
                np.asarray(src, dtype=np.int64),
                np.asarray(dst, dtype=np.int64) - lo,
                np.asarray(mult, dtype=np.int64) - Rp[j],
                where,
            )
        )
    # entries of row j of the upper triangle are column j of the lower one
    col_of = np.repeat(np.arange(n), np.diff(Ap))
    for j in range(n):
        sel = np.flatnonzero(Ai == j)
        ks = col_of[sel]
        diag = sel[ks == j]
        off = sel[ks != j]
        where = plan[j][3]
        tgt = np.asarray([where[int(k)] - Lp[j] for k in col_of[off]], dtype=np.int64)
        plan[j] = plan[j][:3] + (off, tgt, diag)
    _PLANS[key] = plan
    return plan


def ldl_numeric(n, P, Q, Ap, Ai, Ax, Lp, Rp, Ri, Rpos, Li, Lx, D, Dinv):
    C = P * Q
    Ap = np.asarray(Ap)
    Ai = np.asarray(Ai)
    Lp = np.asarray(Lp)
    Rp = np.asarray(Rp)
    Ri = np.asarray(Ri)
    Rpos = np.asarray(Rpos)
    Li = np.asarray(Li)
    Ax = np.asarray(Ax)
    plan = _plan(n, Ap, Ai, Lp, Rp, Ri, Rpos, Li)
    for j in range(n):
        src, dst, mult, a_off, a_tgt, a_diag = plan[j]
        lo, hi = Lp[j], Lp[j + 1]
        col = np.zeros((hi - lo, C))
        np.add.at(col, a_tgt, Ax[a_off])
        dj = Ax[a_diag].sum(axis=0)
        t_lo, t_hi = Rp[j], Rp[j + 1]
        if t_hi > t_lo:
            ks = Ri[t_lo:t_hi]
            ljk = Lx[Rpos[t_lo:t_hi]]
            w = _mul(ljk, D[ks], P, Q)  # L[j,k] d_k
            dj -= _mul(ljk, w, P, Q).sum(axis=0)
            if src.size:
                upd = _mul(Lx[src], w[mult], P, Q)
                np.subtract.at(col, dst, upd)
        D[j] = dj
        if not dj[0] > 0.0:
            return j
        Dinv[j] = _recip(dj[None, :], P, Q)[0]
        if hi > lo:
            Lx[lo:hi] = _mul(col, np.broadcast_to(Dinv[j], col.shape).copy(), P, Q)
    return -1


def lsolve(n, P, Q, Lp, Li, Lx, X):
    for j in range(n):
        lo, hi = Lp[j], Lp[j + 1]
        if hi > lo:
            xj = np.broadcast_to(X[j], (hi - lo, X.shape[1])).copy()
            X[Li[lo:hi]] -= _mul(np.asarray(Lx[lo:hi]), xj, P, Q)


def dsolve(n, P, Q, Dinv, X):
    X[:] = _mul(np.asarray(X), np.asarray(Dinv), P, Q)


def ltsolve(n, P, Q, Lp, Li, Lx, X):
    for j in range(n - 1, -1, -1):
        lo, hi = Lp[j], Lp[j + 1]
        if hi > lo:
            X[j] -= _mul(np.asarray(Lx[lo:hi]), np.asarray(X[Li[lo:hi]]), P, Q).sum(axis=0)
