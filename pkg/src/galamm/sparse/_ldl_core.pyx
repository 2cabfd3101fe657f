# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Up-looking sparse LDL' factorisation over truncated Taylor jets.

Every scalar is a flat block of ``C = P * Q`` doubles laid out as in
``galamm.autodiff.Dual``: entry ``a * Q + b`` is the (a, b) coefficient.
All index structure (row patterns of L and the slot each entry lands in)
comes precomputed from the symbolic phase, so the numeric kernel is a
straight sequence of jet multiply-adds.
"""

from libc.stdlib cimport malloc, free


cdef inline void jmul_sub(const double* x, const double* y, double* acc,
                          int P, int Q) noexcept nogil:
    # acc -= x * y
    cdef int C = P * Q
    cdef int a, b, c
    cdef double x0 = x[0], y0 = y[0]
    if C == 1:
        acc[0] -= x0 * y0
        return
    acc[0] -= x0 * y0
    for c in range(1, C):
        acc[c] -= x0 * y[c] + y0 * x[c]
    if P > 1 and Q > 1:
        for a in range(1, P):
            for b in range(1, Q):
                acc[a * Q + b] -= x[a * Q] * y[b] + y[a * Q] * x[b]


cdef inline void jmul(const double* x, const double* y, double* out,
                      int P, int Q) noexcept nogil:
    cdef int C = P * Q
    cdef int a, b, c
    cdef double x0 = x[0], y0 = y[0]
    out[0] = x0 * y0
    for c in range(1, C):
        out[c] = x0 * y[c] + y0 * x[c]
    if P > 1 and Q > 1:
        for a in range(1, P):
            for b in range(1, Q):
                out[a * Q + b] += x[a * Q] * y[b] + y[a * Q] * x[b]


cdef inline void jrecip(const double* v, double* out, int P, int Q) noexcept nogil:
    cdef int C = P * Q
    cdef int a, b, c
    cdef double f0 = 1.0 / v[0]
    cdef double f1 = -f0 * f0
    cdef double f2 = 2.0 * f0 * f0 * f0
    out[0] = f0
    for c in range(1, C):
        out[c] = f1 * v[c]
    if P > 1 and Q > 1:
        for a in range(1, P):
            for b in range(1, Q):
                out[a * Q + b] += f2 * v[a * Q] * v[b]


def ldl_numeric(int n, int P, int Q,
                const int[::1] Ap, const int[::1] Ai, const double[:, ::1] Ax,
                const int[::1] Lp, const int[::1] Rp, const int[::1] Ri,
                const int[::1] Rpos, const int[::1] Li,
                double[:, ::1] Lx, double[:, ::1] D, double[:, ::1] Dinv):
    """Numeric factorisation. Returns -1 on success or the failing column."""
    cdef int C = P * Q
    cdef int k, p, t, i, j, c, pend
    cdef double* Y = <double*> malloc(n * C * sizeof(double))
    cdef double* yi = <double*> malloc(C * sizeof(double))
    cdef double* lki = <double*> malloc(C * sizeof(double))
    cdef int status = -1
    if Y == NULL or yi == NULL or lki == NULL:
        free(Y); free(yi); free(lki)
        raise MemoryError()
    with nogil:
        for c in range(n * C):
            Y[c] = 0.0
        for k in range(n):
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                for c in range(C):
                    Y[i * C + c] += Ax[p, c]
            for c in range(C):
                D[k, c] = Y[k * C + c]
                Y[k * C + c] = 0.0
            for t in range(Rp[k], Rp[k + 1]):
                i = Ri[t]
                pend = Rpos[t]
                for c in range(C):
                    yi[c] = Y[i * C + c]
                    Y[i * C + c] = 0.0
                for p in range(Lp[i], pend):
                    j = Li[p]
                    jmul_sub(&Lx[p, 0], yi, &Y[j * C], P, Q)
                jmul(yi, &Dinv[i, 0], lki, P, Q)
                jmul_sub(lki, yi, &D[k, 0], P, Q)
                for c in range(C):
                    Lx[pend, c] = lki[c]
            if not D[k, 0] > 0.0:
                status = k
                break
            jrecip(&D[k, 0], &Dinv[k, 0], P, Q)
    free(Y); free(yi); free(lki)
    return status


def lsolve(int n, int P, int Q, const int[::1] Lp, const int[::1] Li,
           const double[:, ::1] Lx, double[:, ::1] X):
    """Solve ``L x = b`` in place (unit lower triangular L)."""
    cdef int j, p
    with nogil:
        for j in range(n):
            for p in range(Lp[j], Lp[j + 1]):
                jmul_sub(&Lx[p, 0], &X[j, 0], &X[Li[p], 0], P, Q)


def dsolve(int n, int P, int Q, const double[:, ::1] Dinv, double[:, ::1] X):
    """Solve ``D x = b`` in place using the stored reciprocals."""
    cdef int C = P * Q
    cdef int j, c
    cdef double* tmp = <double*> malloc(C * sizeof(double))
    if tmp == NULL:
        raise MemoryError()
    with nogil:
        for j in range(n):
            jmul(&X[j, 0], &Dinv[j, 0], tmp, P, Q)
            for c in range(C):
                X[j, c] = tmp[c]
    free(tmp)


def ltsolve(int n, int P, int Q, const int[::1] Lp, const int[::1] Li,
            const double[:, ::1] Lx, double[:, ::1] X):
    """Solve ``L' x = b`` in place."""
    cdef int j, p
    with nogil:
        for j in range(n - 1, -1, -1):
            for p in range(Lp[j], Lp[j + 1]):
                jmul_sub(&Lx[p, 0], &X[Li[p], 0], &X[j, 0], P, Q)
