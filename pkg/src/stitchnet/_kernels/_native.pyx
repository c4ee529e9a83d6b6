# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv/pool kernels. API mirrors pykernels exactly.

Plain nested loops beat im2col at the small tensor sizes this package trains
on, and keep the reduction order fixed (deterministic results per backend).
"""

import numpy as np

from libc.stdint cimport int64_t

ctypedef fused real:
    float
    double


def conv2d_forward(x, w, b, int stride=1):
    """Valid cross-correlation of an NCHW batch with FCkk filters plus bias."""
    return _conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                           np.ascontiguousarray(b), stride)


def _conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (wd - kw) // stride + 1
    out_arr = np.empty((n, f, oh, ow), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, p, q, ci, ki, kj
    cdef real acc
    for i in range(n):
        for j in range(f):
            for p in range(oh):
                for q in range(ow):
                    acc = 0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc = acc + x[i, ci, p * stride + ki, q * stride + kj] * w[j, ci, ki, kj]
                    out[i, j, p, q] = acc + b[j]
    return out_arr


def conv2d_backward(x, w, dy, int stride=1):
    """Gradients of conv2d_forward: returns (dx, dw, db)."""
    return _conv2d_backward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                            np.ascontiguousarray(dy), stride)


def _conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] dy, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=dtype)
    dw_arr = np.zeros((w.shape[0], w.shape[1], w.shape[2], w.shape[3]), dtype=dtype)
    db_arr = np.zeros(f, dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef real[:, :, :, ::1] dw = dw_arr
    cdef real[::1] db = db_arr
    cdef Py_ssize_t i, j, p, q, ci, ki, kj, r, s
    cdef real g
    for i in range(n):
        for j in range(f):
            for p in range(oh):
                for q in range(ow):
                    g = dy[i, j, p, q]
                    db[j] = db[j] + g
                    for ci in range(c):
                        for ki in range(kh):
                            r = p * stride + ki
                            for kj in range(kw):
                                s = q * stride + kj
                                dx[i, ci, r, s] = dx[i, ci, r, s] + g * w[j, ci, ki, kj]
                                dw[j, ci, ki, kj] = dw[j, ci, ki, kj] + g * x[i, ci, r, s]
    return dx_arr, dw_arr, db_arr


def maxpool2d_forward(x, int pool=2, stride=None):
    """Max over pool x pool windows; returns (y, arg) with flat plane indices."""
    cdef int s = pool if stride is None else <int> stride
    return _maxpool2d_forward(np.ascontiguousarray(x), pool, s)


def _maxpool2d_forward(real[:, :, :, ::1] x, int pool, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - pool) // stride + 1
    cdef Py_ssize_t ow = (w - pool) // stride + 1
    y_arr = np.empty((n, c, oh, ow), dtype=np.float32 if real is float else np.float64)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] y = y_arr
    cdef int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, ci, p, q, ki, kj, r, s, best_idx
    cdef real best, v
    for i in range(n):
        for ci in range(c):
            for p in range(oh):
                for q in range(ow):
                    best = x[i, ci, p * stride, q * stride]
                    best_idx = (p * stride) * w + q * stride
                    for ki in range(pool):
                        r = p * stride + ki
                        for kj in range(pool):
                            s = q * stride + kj
                            v = x[i, ci, r, s]
                            if v > best:
                                best = v
                                best_idx = r * w + s
                    y[i, ci, p, q] = best
                    arg[i, ci, p, q] = best_idx
    return y_arr, arg_arr


def maxpool2d_backward(arg, dy, x_shape):
    """Scatter upstream gradients back to the argmax positions."""
    return _maxpool2d_backward(np.ascontiguousarray(arg), np.ascontiguousarray(dy),
                               x_shape[0], x_shape[1], x_shape[2], x_shape[3])


def _maxpool2d_backward(int64_t[:, :, :, ::1] arg, real[:, :, :, ::1] dy,
                        Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    dx_arr = np.zeros((n, c, h * w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t i, ci, p, q
    for i in range(n):
        for ci in range(c):
            for p in range(oh):
                for q in range(ow):
                    dx[i, ci, arg[i, ci, p, q]] = dx[i, ci, arg[i, ci, p, q]] + dy[i, ci, p, q]
    return dx_arr.reshape(n, c, h, w)
