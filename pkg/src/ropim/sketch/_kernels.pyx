# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sketch kernels (scatter-add projection, gather retraction)."""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

BACKEND = "cython"


cdef void _project(const int[::1] h0, const signed char[::1] s,
                   const floating[:, ::1] X, floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t j, d, K = X.shape[0], D = X.shape[1]
    cdef int b
    for j in range(K):
        b = h0[j]
        if s[j] > 0:
            for d in range(D):
                out[b, d] += X[j, d]
        else:
            for d in range(D):
                out[b, d] -= X[j, d]


def project(const int[::1] h0, const signed char[::1] s, const floating[:, ::1] X, int K_out):
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((K_out, X.shape[1]), dtype=dtype)
    cdef floating[:, ::1] o = out
    with nogil:
        _project(h0, s, X, o)
    return out


def retract(const int[::1] h0, const signed char[::1] s, const double[::1] scale,
            const floating[:, ::1] Y):
    cdef Py_ssize_t j, d, K = h0.shape[0], D = Y.shape[1]
    cdef int b
    cdef floating f
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((K, D), dtype=dtype)
    cdef floating[:, ::1] o = out
    with nogil:
        for j in range(K):
            b = h0[j]
            f = <floating>(s[j] * scale[b])
            for d in range(D):
                o[j, d] = Y[b, d] * f
    return out


def roundtrip(const int[::1] h0, const signed char[::1] s, const double[::1] scale,
              const floating[:, ::1] X, int K_out):
    return retract(h0, s, scale, project(h0, s, X, K_out))


def complement(const int[::1] h0, const signed char[::1] s, const double[::1] scale,
               const floating[:, ::1] X, int K_out):
    cdef Py_ssize_t j, d, K = X.shape[0], D = X.shape[1]
    rt = roundtrip(h0, s, scale, X, K_out)
    cdef floating[:, ::1] r = rt
    with nogil:
        for j in range(K):
            for d in range(D):
                r[j, d] = X[j, d] - r[j, d]
    return rt


def sketch_inner_products(const int[:, ::1] H0, const signed char[:, ::1] S,
                          const double[::1] x, const double[::1] y, int K_out):
    cdef Py_ssize_t m, j, M = H0.shape[0], K = H0.shape[1]
    cdef int b
    cdef double acc
    out = np.empty(M, dtype=np.float64)
    px_arr = np.zeros(K_out, dtype=np.float64)
    py_arr = np.zeros(K_out, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[::1] px = px_arr
    cdef double[::1] py = py_arr
    with nogil:
        for m in range(M):
            for b in range(K_out):
                px[b] = 0.0
                py[b] = 0.0
            for j in range(K):
                b = H0[m, j]
                px[b] += S[m, j] * x[j]
                py[b] += S[m, j] * y[j]
            acc = 0.0
            for b in range(K_out):
                acc += px[b] * py[b]
            o[m] = acc
    return out
