# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: summed log-likelihoods and gradients.

Mirrors the semantics of ``qbayes._backend._ref`` for the functions that
dominate SMC runtime.  Accumulation is sequential over data, so results
can differ from numpy's pairwise sums by rounding only.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, log, sin

cnp.import_array()

DEF LOG_FLOOR = -1.0e9
DEF MAX_DIM = 16


cdef inline double _p1(int kind, const double* hyper, const double* theta,
                       int dim, double c1, double c2) noexcept nogil:
    cdef double acc = 0.0
    cdef double c
    cdef int d
    if kind == 0:
        c = sin(theta[0] * c1)
        acc = c * c
    elif kind == 1:
        for d in range(dim):
            c = cos(theta[d] * c1 / 2.0)
            acc += c * c
        acc /= dim
    elif kind == 2:
        acc = exp(-c1 / theta[0])
    elif kind == 3:
        acc = 0.5 + 0.5 * exp(-c1 / theta[0])
    elif kind == 4:
        acc = hyper[0] * exp(-c1 / theta[0]) + hyper[1]
    elif kind == 5:
        acc = 0.5 + 0.5 * exp(-theta[1] * c1) * cos(theta[0] * c1)
    elif kind == 6:
        c = sin((theta[0] * c1 + c2) / 2.0)
        acc = c * c
    if acc < 0.0:
        acc = 0.0
    elif acc > 1.0:
        acc = 1.0
    return acc


cdef inline void _dp1(int kind, const double* hyper, const double* theta,
                      int dim, double c1, double c2, double* out) noexcept nogil:
    cdef double env
    cdef int d
    if kind == 0:
        out[0] = c1 * sin(2.0 * theta[0] * c1)
    elif kind == 1:
        for d in range(dim):
            out[d] = -(c1 / (2.0 * dim)) * sin(theta[d] * c1)
    elif kind == 2:
        out[0] = c1 / (theta[0] * theta[0]) * exp(-c1 / theta[0])
    elif kind == 3:
        out[0] = 0.5 * c1 / (theta[0] * theta[0]) * exp(-c1 / theta[0])
    elif kind == 4:
        out[0] = hyper[0] * c1 / (theta[0] * theta[0]) * exp(-c1 / theta[0])
    elif kind == 5:
        env = exp(-theta[1] * c1)
        out[0] = -0.5 * c1 * env * sin(theta[0] * c1)
        out[1] = -0.5 * c1 * env * cos(theta[0] * c1)
    elif kind == 6:
        out[0] = 0.5 * c1 * sin(theta[0] * c1 + c2)


cdef inline double _log_outcome(double p1, long outcome) noexcept nogil:
    cdef double p = p1 if outcome == 1 else 1.0 - p1
    if p > 0.0:
        return log(p)
    return LOG_FLOOR


def loglike_sum(int kind, double[::1] hyper, double[:, ::1] thetas,
                double[::1] c1, double[::1] c2, long[::1] outcomes):
    cdef Py_ssize_t m = thetas.shape[0]
    cdef Py_ssize_t n = c1.shape[0]
    cdef int dim = <int>thetas.shape[1]
    out_arr = np.zeros(m)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double acc
    cdef const double* hp = &hyper[0] if hyper.shape[0] > 0 else NULL
    with nogil:
        for i in range(m):
            acc = 0.0
            for k in range(n):
                acc += _log_outcome(_p1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k]),
                                    outcomes[k])
            out[i] = acc
    return out_arr


def grad_loglike_sum(int kind, double[::1] hyper, double[:, ::1] thetas,
                     double[::1] c1, double[::1] c2, long[::1] outcomes):
    cdef Py_ssize_t m = thetas.shape[0]
    cdef Py_ssize_t n = c1.shape[0]
    cdef int dim = <int>thetas.shape[1]
    if dim > MAX_DIM:
        raise ValueError("model dimension exceeds compiled limit")
    out_arr = np.zeros((m, dim))
    cdef double[:, ::1] out = out_arr
    cdef double dp[MAX_DIM]
    cdef Py_ssize_t i, k
    cdef int d
    cdef double p1, p, sign
    cdef const double* hp = &hyper[0] if hyper.shape[0] > 0 else NULL
    with nogil:
        for i in range(m):
            for k in range(n):
                p1 = _p1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k])
                if outcomes[k] == 1:
                    p = p1
                    sign = 1.0
                else:
                    p = 1.0 - p1
                    sign = -1.0
                _dp1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k], dp)
                for d in range(dim):
                    out[i, d] += sign * dp[d] / p
    return out_arr


def loglike_sum_indexed(int kind, double[::1] hyper, double[:, ::1] thetas,
                        double[::1] c1, double[::1] c2, long[::1] outcomes,
                        long[:, ::1] idx):
    cdef Py_ssize_t m = thetas.shape[0]
    cdef Py_ssize_t nsub = idx.shape[1]
    cdef int dim = <int>thetas.shape[1]
    out_arr = np.zeros(m)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef long k
    cdef double acc
    cdef const double* hp = &hyper[0] if hyper.shape[0] > 0 else NULL
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(nsub):
                k = idx[i, j]
                acc += _log_outcome(_p1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k]),
                                    outcomes[k])
            out[i] = acc
    return out_arr


def grad_loglike_terms_indexed(int kind, double[::1] hyper, double[:, ::1] thetas,
                               double[::1] c1, double[::1] c2, long[::1] outcomes,
                               long[:, ::1] idx):
    cdef Py_ssize_t m = thetas.shape[0]
    cdef Py_ssize_t nsub = idx.shape[1]
    cdef int dim = <int>thetas.shape[1]
    if dim > MAX_DIM:
        raise ValueError("model dimension exceeds compiled limit")
    out_arr = np.zeros((m, nsub, dim))
    cdef double[:, :, ::1] out = out_arr
    cdef double dp[MAX_DIM]
    cdef Py_ssize_t i, j
    cdef int d
    cdef long k
    cdef double p1, p, sign
    cdef const double* hp = &hyper[0] if hyper.shape[0] > 0 else NULL
    with nogil:
        for i in range(m):
            for j in range(nsub):
                k = idx[i, j]
                p1 = _p1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k])
                if outcomes[k] == 1:
                    p = p1
                    sign = 1.0
                else:
                    p = 1.0 - p1
                    sign = -1.0
                _dp1(kind, hp, &thetas[i, 0], dim, c1[k], c2[k], dp)
                for d in range(dim):
                    out[i, j, d] = sign * dp[d] / p
    return out_arr
