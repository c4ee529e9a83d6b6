"""Pure-numpy conv/pool kernels, im2col style.

Fallback implementation for the compiled core in ``_native``. Both backends
share one API: NCHW activations, FCHW filters, valid cross-correlation (no
padding), square pooling windows. Argmax ties inside a pooling window resolve
to the first element in row-major window order in both backends.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(x, kh, kw, sh, sw):
    # zero-copy sliding view (N, C, OH, OW, kh, kw); callers only read it
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(x, (n, c, oh, ow, kh, kw), (s0, s1, s2 * sh, s3 * sw, s2, s3))


def conv2d_forward(x, w, b, stride=1):
    """Valid cross-correlation of an NCHW batch with FCkk filters plus bias."""
    kh, kw = w.shape[2], w.shape[3]
    v = _windows(x, kh, kw, stride, stride)
    y = np.einsum("nchwij,fcij->nfhw", v, w, optimize=True)
    y += b.reshape(1, -1, 1, 1)
    return y


def conv2d_backward(x, w, dy, stride=1):
    """Gradients of conv2d_forward: returns (dx, dw, db)."""
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    v = _windows(x, kh, kw, stride, stride)
    dw = np.einsum("nchwij,nfhw->fcij", v, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                "fc,nfhw->nchw", w[:, :, i, j], dy, optimize=True
            )
    return dx, dw, db


def maxpool2d_forward(x, pool=2, stride=None):
    """Max over pool x pool windows; returns (y, arg) where arg holds the flat
    row-major index of each window maximum within its input plane."""
    stride = pool if stride is None else stride
    v = _windows(x, pool, pool, stride, stride)
    n, c, oh, ow = v.shape[:4]
    flat = v.reshape(n, c, oh, ow, pool * pool)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = (np.arange(oh) * stride).reshape(1, 1, oh, 1) + local // pool
    cols = (np.arange(ow) * stride).reshape(1, 1, 1, ow) + local % pool
    arg = (rows * x.shape[3] + cols).astype(np.int64)
    return y, arg


def maxpool2d_backward(arg, dy, x_shape):
    """Scatter upstream gradients back to the argmax positions."""
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    ni = np.broadcast_to(np.arange(n).reshape(n, 1, 1, 1), arg.shape)
    ci = np.broadcast_to(np.arange(c).reshape(1, c, 1, 1), arg.shape)
    np.add.at(dx, (ni, ci, arg), dy)
    return dx.reshape(n, c, h, w)
