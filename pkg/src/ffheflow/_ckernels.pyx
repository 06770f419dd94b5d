# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled series kernels; same API as ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double complex _cj(double complex z) nogil:
    return z.real - 1j * z.imag


def conv_sum(const double complex[::1] a, const double complex[::1] b,
             Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t n, bint conj_a):
    cdef Py_ssize_t d
    cdef double complex acc = 0
    if conj_a:
        for d in range(lo, hi + 1):
            acc = acc + _cj(a[d]) * b[n - d]
    else:
        for d in range(lo, hi + 1):
            acc = acc + a[d] * b[n - d]
    return acc


def conv_columns(A, B, Py_ssize_t n, bint conj_a):
    cdef const double[:, ::1] a = np.ascontiguousarray(A, dtype=np.complex128).view(np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.complex128).view(np.float64)
    cdef Py_ssize_t m = a.shape[1] // 2
    out_arr = np.zeros(m, dtype=np.complex128)
    cdef double[::1] out = out_arr.view(np.float64)
    cdef Py_ssize_t d, j
    cdef double ar, ai, br, bi, sr, si, sgn = -1.0 if conj_a else 1.0
    with nogil:
        for j in range(m):
            sr = 0.0
            si = 0.0
            for d in range(1, n):
                ar = a[d, 2 * j]
                ai = sgn * a[d, 2 * j + 1]
                br = b[n - d, 2 * j]
                bi = b[n - d, 2 * j + 1]
                sr = sr + ar * br - ai * bi
                si = si + ar * bi + ai * br
            out[2 * j] = sr
            out[2 * j + 1] = si
    return out_arr


def reciprocal_next(const double complex[::1] F, const double complex[::1] I, Py_ssize_t n):
    cdef Py_ssize_t d
    cdef double complex acc = 0
    for d in range(n):
        acc = acc + F[d] * I[n - d]
    return -acc / I[0]


def magnitude_next(const double[::1] M, const double complex[::1] I, Py_ssize_t n):
    cdef Py_ssize_t d
    cdef double sq = 0.0
    for d in range(n + 1):
        sq += (I[d] * _cj(I[n - d])).real
    for d in range(1, n):
        sq -= M[d] * M[n - d]
    return sq / (2.0 * M[0])
