# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_sqdist(const double[:, ::1] A, const double[:, ::1] B):
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j, best
    cdef double ax, ay, az, dx, dy, dz, d, dmin
    out_d = np.empty(n, dtype=np.float64)
    out_i = np.empty(n, dtype=np.int64)
    cdef double[::1] od = out_d
    cdef long long[::1] oi = out_i
    for i in range(n):
        ax = A[i, 0]; ay = A[i, 1]; az = A[i, 2]
        dmin = 1.0 / 0.0
        best = 0
        for j in range(m):
            dx = ax - B[j, 0]
            dy = ay - B[j, 1]
            dz = az - B[j, 2]
            d = dx * dx + dy * dy
            d = d + dz * dz
            if d < dmin:
                dmin = d
                best = j
        od[i] = dmin
        oi[i] = best
    return out_d, out_i


def aggregate(const double[:, :, ::1] K, const long long[:, ::1] idx, const double[:, ::1] S):
    cdef Py_ssize_t T = K.shape[0], KN = K.shape[1], Q = K.shape[2], F = S.shape[1]
    cdef Py_ssize_t t, k, q, f
    cdef double w
    cdef double *orow
    cdef const double *srow
    cdef const double *krow
    out = np.zeros((T, Q, F), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    if T == 0 or KN == 0 or Q == 0 or F == 0:
        return out
    for t in range(T):
        for k in range(KN):
            srow = &S[idx[t, k], 0]
            krow = &K[t, k, 0]
            for q in range(Q):
                w = krow[q]
                orow = &o[t, q, 0]
                for f in range(F):
                    orow[f] += w * srow[f]
    return out


def scatter(const double[:, :, ::1] K, const long long[:, ::1] idx, const double[:, :, ::1] G,
            Py_ssize_t n_src):
    cdef Py_ssize_t T = K.shape[0], KN = K.shape[1], Q = K.shape[2], F = G.shape[2]
    cdef Py_ssize_t t, k, q, f
    cdef double w, acc
    cdef double *orow
    cdef const double *grow
    cdef const double *krow
    out = np.zeros((n_src, F), dtype=np.float64)
    cdef double[:, ::1] o = out
    if T == 0 or KN == 0 or Q == 0 or F == 0:
        return out
    for t in range(T):
        grow = &G[t, 0, 0]
        for k in range(KN):
            orow = &o[idx[t, k], 0]
            krow = &K[t, k, 0]
            for f in range(F):
                acc = 0.0
                for q in range(Q):
                    acc += krow[q] * grow[q * F + f]
                orow[f] += acc
    return out
