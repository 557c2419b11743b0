# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment reduction kernels.

Tight loops over edge arrays; these dominate the runtime of training, so
they are written as plain C loops.  Contracts mirror ``_kernels_py``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def segment_sum(double[:, ::1] values, long long[::1] segments, Py_ssize_t n):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef long long s
    for i in range(m):
        s = segments[i]
        if s < 0:
            continue
        for j in range(d):
            out[s, j] += values[i, j]
    return out_arr


def segment_max(double[:, ::1] values, long long[::1] segments, Py_ssize_t n):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    arg_arr = np.full((n, d), -1, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, j
    cdef long long s
    cdef double v
    for i in range(m):
        s = segments[i]
        if s < 0:
            continue
        for j in range(d):
            v = values[i, j]
            if arg[s, j] < 0 or v > out[s, j]:
                out[s, j] = v
                arg[s, j] = i
    return out_arr, arg_arr


def index_add(double[:, ::1] out, long long[::1] idx, double[:, ::1] values):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t i, j
    cdef long long s
    for i in range(m):
        s = idx[i]
        if s < 0:
            continue
        for j in range(d):
            out[s, j] += values[i, j]
    return np.asarray(out)


def max_grad_scatter(double[:, ::1] grad, long long[:, ::1] argrow, Py_ssize_t m):
    cdef Py_ssize_t n = grad.shape[0]
    cdef Py_ssize_t d = grad.shape[1]
    out_arr = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef long long r
    for i in range(n):
        for j in range(d):
            r = argrow[i, j]
            if r >= 0:
                out[r, j] += grad[i, j]
    return out_arr
