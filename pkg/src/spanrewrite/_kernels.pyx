# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels (see ``_kernels_py`` for the reference)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF MATCH = 0
DEF SUBSTITUTE = 1
DEF DELETE = 2
DEF INSERT = 3


cdef cnp.int64_t[::1] _as_ids(seq):
    return np.ascontiguousarray(seq, dtype=np.int64)


def levenshtein(a, b):
    cdef cnp.int64_t[::1] x = _as_ids(a)
    cdef cnp.int64_t[::1] y = _as_ids(b)
    if x.shape[0] < y.shape[0]:
        x, y = y, x
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef cnp.int32_t[::1] prev = np.arange(m + 1, dtype=np.int32)
    cdef cnp.int32_t[::1] cur = np.empty(m + 1, dtype=np.int32)
    cdef cnp.int32_t[::1] tmp
    cdef int best
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if x[i - 1] == y[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def edit_ops(a, b):
    cdef cnp.int64_t[::1] x = _as_ids(a)
    cdef cnp.int64_t[::1] y = _as_ids(b)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j, k
    cdef cnp.int32_t[:, ::1] d = np.empty((n + 1, m + 1), dtype=np.int32)
    cdef int best, here
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        d[i, 0] = i
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (0 if x[i - 1] == y[j - 1] else 1)
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            d[i, j] = best
    cdef cnp.int64_t[:, ::1] out = np.empty((n + m, 3), dtype=np.int64)
    k = 0
    i = n
    j = m
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and x[i - 1] == y[j - 1] and here == d[i - 1, j - 1]:
            out[k, 0] = MATCH; out[k, 1] = i - 1; out[k, 2] = j - 1
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and here == d[i - 1, j - 1] + 1:
            out[k, 0] = SUBSTITUTE; out[k, 1] = i - 1; out[k, 2] = j - 1
            i -= 1
            j -= 1
        elif i > 0 and here == d[i - 1, j] + 1:
            out[k, 0] = DELETE; out[k, 1] = i - 1; out[k, 2] = j
            i -= 1
        else:
            out[k, 0] = INSERT; out[k, 1] = i; out[k, 2] = j - 1
            j -= 1
        k += 1
    arr = np.asarray(out[:k])[::-1]
    return [(int(r[0]), int(r[1]), int(r[2])) for r in arr.tolist()]


def lcs_length(a, b):
    cdef cnp.int64_t[::1] x = _as_ids(a)
    cdef cnp.int64_t[::1] y = _as_ids(b)
    if x.shape[0] < y.shape[0]:
        x, y = y, x
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef cnp.int32_t[::1] prev = np.zeros(m + 1, dtype=np.int32)
    cdef cnp.int32_t[::1] cur = np.zeros(m + 1, dtype=np.int32)
    cdef cnp.int32_t[::1] tmp
    for i in range(1, n + 1):
        cur[0] = 0
        for j in range(1, m + 1):
            if x[i - 1] == y[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
