# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selection kernels: k-th smallest absolute value, flat and row-wise.

These back the top-K threshold computation, the one compute-heavy step on the
compression path. Semantics are identical to dctsim.kernels._numpy.
"""

import numpy as np

cimport cython
from cython cimport floating


cdef extern from "<algorithm>" namespace "std" nogil:
    void nth_element[Iter](Iter first, Iter nth, Iter last)


cdef inline void _abs_into(const floating* src, floating* dst, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        dst[i] = src[i] if src[i] >= 0 else -src[i]


def kth_abs_value(const floating[::1] x, Py_ssize_t k):
    """k-th smallest of |x| (1-indexed), 1 <= k <= len(x)."""
    cdef Py_ssize_t n = x.shape[0]
    if n == 0:
        raise ValueError("empty vector")
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if floating is double:
        scratch_arr = np.empty(n, dtype=np.float64)
    else:
        scratch_arr = np.empty(n, dtype=np.float32)
    cdef floating[::1] scratch = scratch_arr
    cdef floating* p = &scratch[0]
    with nogil:
        _abs_into(&x[0], p, n)
        nth_element(p, p + (k - 1), p + n)
    return scratch_arr[k - 1]


def row_kth_abs_value(const floating[:, ::1] x, Py_ssize_t k):
    """Per-row k-th smallest of |row| (1-indexed) for a C-contiguous matrix."""
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t cols = x.shape[1]
    if rows == 0 or cols == 0:
        raise ValueError("empty matrix")
    if k < 1 or k > cols:
        raise ValueError(f"k={k} out of range [1, {cols}]")
    if floating is double:
        out_arr = np.empty(rows, dtype=np.float64)
        scratch_arr = np.empty(cols, dtype=np.float64)
    else:
        out_arr = np.empty(rows, dtype=np.float32)
        scratch_arr = np.empty(cols, dtype=np.float32)
    cdef floating[::1] out = out_arr
    cdef floating[::1] scratch = scratch_arr
    cdef floating* p = &scratch[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(rows):
            _abs_into(&x[i, 0], p, cols)
            nth_element(p, p + (k - 1), p + cols)
            out[i] = p[k - 1]
    return out_arr
