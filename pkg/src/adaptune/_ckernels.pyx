# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: 2-D valid convolution and true-class ranking.

Signatures and results mirror ``adaptune._pykernels`` exactly; the pure
numpy versions are the reference the tests compare against.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w):
    """x: [N, Cin, H, W], w: [Cout, Cin, K, K] -> [N, Cout, H-K+1, W-K+1]."""
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = h - k + 1, ow = wd - k + 1
    if w.shape[1] != cin or w.shape[3] != k:
        raise ValueError("kernel shape does not match input channels")
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than input")
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, co, ci, i, j, u, v
    cdef double acc
    with nogil:
        for b in range(n):
            for co in range(cout):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for ci in range(cin):
                            for u in range(k):
                                for v in range(k):
                                    acc = acc + x[b, ci, i + u, j + v] * w[co, ci, u, v]
                        o[b, co, i, j] = acc
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dout):
    """Return (dx, dw) for ``conv2d_forward`` given upstream gradient ``dout``."""
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    if dout.shape[0] != n or dout.shape[1] != cout or oh != h - k + 1 or ow != wd - k + 1:
        raise ValueError("upstream gradient shape mismatch")
    dx_arr = np.zeros((n, cin, h, wd), dtype=np.float64)
    dw_arr = np.zeros((cout, cin, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t b, co, ci, i, j, u, v
    cdef double g, acc
    with nogil:
        # dw: one register reduction per kernel tap
        for co in range(cout):
            for ci in range(cin):
                for u in range(k):
                    for v in range(k):
                        acc = 0.0
                        for b in range(n):
                            for i in range(oh):
                                for j in range(ow):
                                    acc = acc + dout[b, co, i, j] * x[b, ci, i + u, j + v]
                        dw[co, ci, u, v] = acc
        # dx: scatter each tap along contiguous rows
        for b in range(n):
            for ci in range(cin):
                for co in range(cout):
                    for u in range(k):
                        for v in range(k):
                            g = w[co, ci, u, v]
                            for i in range(oh):
                                for j in range(ow):
                                    dx[b, ci, i + u, j + v] += g * dout[b, co, i, j]
    return dx_arr, dw_arr


def true_class_ranks(const double[:, ::1] probs, const long long[::1] labels):
    """1-based rank of each row's true class; ties rank the lower class index first."""
    cdef Py_ssize_t n = probs.shape[0], c = probs.shape[1]
    if labels.shape[0] != n:
        raise ValueError("labels length does not match probs rows")
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] r = out
    cdef Py_ssize_t i, j
    cdef long long y, rank
    cdef double py
    for i in range(n):
        y = labels[i]
        if y < 0 or y >= c:
            raise ValueError(f"label {y} outside [0, {c})")
    with nogil:
        for i in range(n):
            y = labels[i]
            py = probs[i, y]
            rank = 1
            for j in range(c):
                if probs[i, j] > py or (probs[i, j] == py and j < y):
                    rank += 1
            r[i] = rank
    return out
