# cython: language_level=3
"""Compiled sequence kernels.

Every loop accumulates left to right in the same order as ``_pykernels`` so
both backends return bit-identical doubles.
"""
from libc.math cimport fabs
from libc.stdlib cimport malloc, free

import numpy as np


def running_max(const double[::1] v):
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t t
    cdef double m
    if n == 0:
        return out
    m = v[0]
    for t in range(n):
        if v[t] > m:
            m = v[t]
        o[t] = m
    return out


def total_variation(const double[::1] v):
    cdef Py_ssize_t t
    cdef double s = 0.0
    for t in range(1, v.shape[0]):
        s += fabs(v[t] - v[t - 1])
    return s


def regret_sum(const double[::1] v):
    cdef Py_ssize_t t
    cdef double s = 0.0
    cdef double m
    if v.shape[0] == 0:
        return 0.0
    m = v[0]
    for t in range(v.shape[0]):
        if v[t] > m:
            m = v[t]
        s += m - v[t]
    return s


def regression_mass(const double[::1] v):
    cdef Py_ssize_t t
    cdef double s = 0.0
    cdef double d
    for t in range(1, v.shape[0]):
        d = v[t - 1] - v[t]
        if d > 0.0:
            s += d
    return s


def count_small_steps(const double[::1] v, double eps):
    cdef Py_ssize_t t
    cdef Py_ssize_t c = 0
    for t in range(1, v.shape[0]):
        if fabs(v[t] - v[t - 1]) < eps:
            c += 1
    return c


def count_rises(const double[::1] v, double eps):
    cdef Py_ssize_t t
    cdef Py_ssize_t c = 0
    for t in range(1, v.shape[0]):
        if v[t] - v[t - 1] > eps:
            c += 1
    return c


def dtw_distance(const double[::1] a, const double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double best, cost
    cdef double *prev
    cdef double *cur
    cdef double *tmp
    if n == 0 or m == 0:
        raise ValueError("dtw_distance needs non-empty sequences")
    prev = <double *> malloc(m * sizeof(double))
    cur = <double *> malloc(m * sizeof(double))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    try:
        prev[0] = fabs(a[0] - b[0])
        for j in range(1, m):
            prev[j] = prev[j - 1] + fabs(a[0] - b[j])
        for i in range(1, n):
            cur[0] = prev[0] + fabs(a[i] - b[0])
            for j in range(1, m):
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = best + fabs(a[i] - b[j])
            tmp = prev
            prev = cur
            cur = tmp
        return prev[m - 1]
    finally:
        free(prev)
        free(cur)
