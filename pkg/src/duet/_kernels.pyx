# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mean-pooling kernels. Must agree with ``duet._kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def pool_forward(const double[:, ::1] emb, const cnp.int64_t[::1] ids, const cnp.int64_t[::1] offsets):
    """Mean of ``emb`` rows for each segment ``ids[offsets[k]:offsets[k+1]]``."""
    cdef Py_ssize_t nseg = offsets.shape[0] - 1
    cdef Py_ssize_t dim = emb.shape[1]
    cdef Py_ssize_t vocab = emb.shape[0]
    out_arr = np.zeros((nseg, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, t, j, start, stop
    cdef cnp.int64_t row
    cdef double count
    for k in range(nseg):
        start = offsets[k]
        stop = offsets[k + 1]
        if stop <= start:
            raise ValueError("empty segment")
        for t in range(start, stop):
            row = ids[t]
            if row < 0 or row >= vocab:
                raise IndexError("token id out of range")
            for j in range(dim):
                out[k, j] += emb[row, j]
        count = <double>(stop - start)
        for j in range(dim):
            out[k, j] = out[k, j] / count
    return out_arr


def pool_backward(const double[:, ::1] grad_pooled, const cnp.int64_t[::1] ids,
                  const cnp.int64_t[::1] offsets, double[:, ::1] grad_emb):
    """Scatter-add ``grad_pooled[k] / len_k`` into ``grad_emb`` for every token of segment k."""
    cdef Py_ssize_t nseg = offsets.shape[0] - 1
    cdef Py_ssize_t dim = grad_pooled.shape[1]
    cdef Py_ssize_t vocab = grad_emb.shape[0]
    cdef Py_ssize_t k, t, j, start, stop
    cdef cnp.int64_t row
    cdef double count
    scaled_arr = np.empty(dim, dtype=np.float64)
    cdef double[::1] scaled = scaled_arr
    for k in range(nseg):
        start = offsets[k]
        stop = offsets[k + 1]
        if stop <= start:
            raise ValueError("empty segment")
        count = <double>(stop - start)
        for j in range(dim):
            scaled[j] = grad_pooled[k, j] / count
        for t in range(start, stop):
            row = ids[t]
            if row < 0 or row >= vocab:
                raise IndexError("token id out of range")
            for j in range(dim):
                grad_emb[row, j] += scaled[j]
