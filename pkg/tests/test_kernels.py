"""Conv/pool kernel correctness: brute-force oracles and backend parity."""

import numpy as np
import pytest

from stitchnet import _kernels
from stitchnet._kernels import pykernels
from stitchnet.gradcheck import finite_diff

BACKENDS = [pykernels]
if _kernels.BACKEND == "native":
    BACKENDS.append(_kernels._impl)
IDS = ["python", "native"][: len(BACKENDS)]


def conv_reference(x, w, b, stride):
    """Independent quadruple-loop cross-correlation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=np.float64)
    for i in range(n):
        for j in range(f):
            for p in range(oh):
                for q in range(ow):
                    patch = x[i, :, p * stride : p * stride + kh, q * stride : q * stride + kw]
                    out[i, j, p, q] = np.sum(patch * w[j]) + b[j]
    return out


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_reference(impl, stride, rng):
    x = rng.standard_normal((3, 2, 9, 9))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    got = impl.conv2d_forward(x, w, b, stride)
    want = conv_reference(x, w, b, stride)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_conv_backward_matches_finite_differences(impl, rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 4, 4))  # random projection makes the loss scalar
    dx, dw, db = impl.conv2d_backward(x, w, (r * 1.0), 1)
    num_dx = finite_diff(lambda v: float((impl.conv2d_forward(v, w, b, 1) * r).sum()), x.copy(), 1e-6)
    num_dw = finite_diff(lambda v: float((impl.conv2d_forward(x, v, b, 1) * r).sum()), w.copy(), 1e-6)
    num_db = finite_diff(lambda v: float((impl.conv2d_forward(x, w, v, 1) * r).sum()), b.copy(), 1e-6)
    np.testing.assert_allclose(dx, num_dx, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, num_dw, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, num_db, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_maxpool_hand_case(impl):
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, arg = impl.maxpool2d_forward(x, 2, 2)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 4.0
    assert arg[0, 0, 0, 0] == 3  # flat index of the 4.0 in the 2x2 plane


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_maxpool_backward_routes_to_argmax(impl, rng):
    x = rng.standard_normal((2, 3, 6, 6))
    y, arg = impl.maxpool2d_forward(x, 2, 2)
    dy = rng.standard_normal(y.shape)
    dx = impl.maxpool2d_backward(arg, dy, x.shape)
    assert dx.shape == x.shape
    # total gradient mass is conserved (windows do not overlap at stride 2)
    np.testing.assert_allclose(dx.sum(), dy.sum(), rtol=1e-12)
    # every nonzero lands on its window's max
    for n in range(2):
        for c in range(3):
            for p in range(3):
                for q in range(3):
                    win = x[n, c, 2 * p : 2 * p + 2, 2 * q : 2 * q + 2]
                    sub = dx[n, c, 2 * p : 2 * p + 2, 2 * q : 2 * q + 2]
                    flat = np.flatnonzero(sub)
                    assert len(flat) <= 1
                    if len(flat):
                        assert win.reshape(-1)[flat[0]] == win.max()


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_maxpool_tie_takes_first_in_window_order(impl):
    x = np.full((1, 1, 2, 2), 7.0)
    _, arg = impl.maxpool2d_forward(x, 2, 2)
    assert arg[0, 0, 0, 0] == 0


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_overlapping_pool_windows(impl, rng):
    x = rng.standard_normal((1, 1, 5, 5))
    y, arg = impl.maxpool2d_forward(x, 3, 1)
    assert y.shape == (1, 1, 3, 3)
    want = np.array([[x[0, 0, i : i + 3, j : j + 3].max() for j in range(3)] for i in range(3)])
    np.testing.assert_array_equal(y[0, 0], want)
    dy = rng.standard_normal(y.shape)
    dx = impl.maxpool2d_backward(arg, dy, x.shape)
    np.testing.assert_allclose(dx.sum(), dy.sum(), rtol=1e-12)


@pytest.mark.skipif(_kernels.BACKEND != "native", reason="compiled kernels unavailable")
def test_backends_agree(rng):
    x = rng.standard_normal((4, 3, 12, 12))
    w = rng.standard_normal((6, 3, 3, 3))
    b = rng.standard_normal(6)
    y_n = _kernels._impl.conv2d_forward(x, w, b, 1)
    y_p = pykernels.conv2d_forward(x, w, b, 1)
    np.testing.assert_allclose(y_n, y_p, rtol=1e-12, atol=1e-12)
    dy = rng.standard_normal(y_n.shape)
    for g_n, g_p in zip(_kernels._impl.conv2d_backward(x, w, dy, 1),
                        pykernels.conv2d_backward(x, w, dy, 1)):
        np.testing.assert_allclose(g_n, g_p, rtol=1e-12, atol=1e-12)
    p_n, a_n = _kernels._impl.maxpool2d_forward(x, 2, 2)
    p_p, a_p = pykernels.maxpool2d_forward(x, 2, 2)
    np.testing.assert_array_equal(p_n, p_p)
    np.testing.assert_array_equal(a_n, a_p)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_float32_stays_float32(impl, rng):
    x = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    b = np.zeros(2, dtype=np.float32)
    y = impl.conv2d_forward(x, w, b, 1)
    assert y.dtype == np.float32
    dx, dw, db = impl.conv2d_backward(x, w, y.copy(), 1)
    assert dx.dtype == dw.dtype == db.dtype == np.float32
    p, arg = impl.maxpool2d_forward(x, 2, 2)
    assert p.dtype == np.float32
    assert impl.maxpool2d_backward(arg, p.copy(), x.shape).dtype == np.float32
