# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled upward/downward passes. Same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp

cnp.import_array()


cdef void _upward(const int[:] labels, const int[:] ptr, const int[:] idx,
                  const double[:, :, :] A, const double[:] pi, const double[:, :] b,
                  const double[:] phi, double[:, :] beta, double[:] logc,
                  double[:] mix) noexcept nogil:
    cdef Py_ssize_t U = labels.shape[0], C = pi.shape[0]
    cdef Py_ssize_t u, i, j, l, lo, hi, a, v
    cdef double s, w, t, c, x
    for u in range(U - 1, -1, -1):
        lo = ptr[u]
        hi = ptr[u + 1]
        x = 0.0
        if lo == hi:
            for i in range(C):
                t = pi[i] * b[i, labels[u]]
                beta[u, i] = t
                x += t
        else:
            a = hi - lo
            s = 0.0
            for l in range(a):
                s += phi[l]
            for i in range(C):
                mix[i] = 0.0
            for l in range(a):
                w = phi[l] / s
                v = idx[lo + l]
                for i in range(C):
                    t = 0.0
                    for j in range(C):
                        t += A[i, j, l] * beta[v, j]
                    mix[i] += w * t
            for i in range(C):
                t = b[i, labels[u]] * mix[i]
                beta[u, i] = t
                x += t
        for i in range(C):
            beta[u, i] /= x
        logc[u] = log(x)


def upward(const int[:] labels, const int[:] ptr, const int[:] idx,
           const double[:, :, :] A, const double[:] pi, const double[:, :] b,
           const double[:] phi):
    cdef Py_ssize_t U = labels.shape[0], C = pi.shape[0]
    beta = np.empty((U, C))
    logc = np.empty(U)
    mix = np.empty(C)
    cdef double[:, :] bv = beta
    cdef double[:] cv = logc
    cdef double[:] mv = mix
    with nogil:
        _upward(labels, ptr, idx, A, pi, b, phi, bv, cv, mv)
    return beta, logc


def loglik(const int[:] labels, const int[:] ptr, const int[:] idx,
           const double[:, :, :] A, const double[:] pi, const double[:, :] b,
           const double[:] phi):
    cdef Py_ssize_t U = labels.shape[0], C = pi.shape[0], u
    beta = np.empty((U, C))
    logc = np.empty(U)
    mix = np.empty(C)
    cdef double[:, :] bv = beta
    cdef double[:] cv = logc
    cdef double[:] mv = mix
    cdef double total = 0.0
    with nogil:
        _upward(labels, ptr, idx, A, pi, b, phi, bv, cv, mv)
        for u in range(U):
            total += cv[u]
    return total


def downward(const int[:] labels, const int[:] ptr, const int[:] idx,
             const double[:, :, :] A, const double[:, :] b, const double[:] phi,
             const double[:, :] beta, const double[:] logc):
    cdef Py_ssize_t U = beta.shape[0], C = beta.shape[1]
    eps_a = np.empty((U, C))
    pair_a = np.zeros((U, C, C))
    gamma_a = np.empty((U, C))
    base_a = np.empty(C)
    cdef double[:, :] eps = eps_a
    cdef double[:, :, :] pair = pair_a
    cdef double[:, :] gamma = gamma_a
    cdef double[:] base = base_a
    cdef Py_ssize_t u, i, j, l, lo, hi, a, v
    cdef double s, w, m, t, ra, cu
    with nogil:
        for i in range(C):
            gamma[0, i] = 1.0
        for u in range(U):
            for i in range(C):
                eps[u, i] = gamma[u, i] * beta[u, i]
            lo = ptr[u]
            hi = ptr[u + 1]
            if lo == hi:
                continue
            a = hi - lo
            s = 0.0
            for l in range(a):
                s += phi[l]
            cu = exp(logc[u])
            for i in range(C):
                base[i] = gamma[u, i] * b[i, labels[u]] / cu
            for l in range(a):
                w = phi[l] / s
                v = idx[lo + l]
                m = 0.0
                for j in range(C):
                    ra = 0.0
                    for i in range(C):
                        t = w * base[i] * A[i, j, l]
                        ra += t
                        t = t * beta[v, j]
                        pair[v, i, j] = t
                        m += t
                    gamma[v, j] = ra
                for j in range(C):
                    gamma[v, j] += 1.0 - m
    return eps_a, pair_a
