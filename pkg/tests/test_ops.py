import numpy as np
import pytest

import oracles
from mmdrfuse import ops


def test_conv_matches_loop_oracle(rng):
    for (c, o, h, w, kh) in ((2, 4, 12, 14, 3), (4, 1, 9, 9, 3),
                             (96, 64, 6, 6, 1), (3, 5, 8, 8, 3)):
        x = rng.standard_normal((2, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((o, c, kh, kh)).astype(np.float32) * 0.3
        b = rng.standard_normal(o).astype(np.float32)
        got = ops.conv2d_forward(x, wt, b)
        want = oracles.conv2d_loop(x.astype(np.float64), wt.astype(np.float64),
                                   b.astype(np.float64))
        assert oracles.rel_err(got, want) < 1e-5


def test_conv_identity_kernel(rng):
    x = rng.random((1, 1, 6, 6), np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1.0
    out = ops.conv2d_forward(x, w, np.zeros(1, np.float32))
    np.testing.assert_allclose(out[0, 0], x[0, 0, 1:-1, 1:-1], rtol=0, atol=0)


def test_conv_all_ones_center():
    x = np.ones((1, 1, 5, 5), np.float32)
    w = np.ones((1, 1, 3, 3), np.float32)
    out = ops.conv2d_forward(x, w, np.zeros(1, np.float32))
    assert out[0, 0, 1, 1] == 9.0


def test_conv_batch_packing_bitwise(rng):
    x = rng.standard_normal((3, 2, 10, 10)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    batched = ops.conv2d_forward(x, w, b)
    for i in range(3):
        single = ops.conv2d_forward(x[i:i + 1], w, b)
        assert np.array_equal(batched[i:i + 1], single)


def test_conv_shape_errors(rng):
    x = rng.random((1, 2, 5, 5), np.float32)
    w = rng.random((1, 3, 3, 3), np.float32)  # channel mismatch
    with pytest.raises(ops.ShapeError):
        ops.conv2d_forward(x, w, np.zeros(1, np.float32))
    small = rng.random((1, 1, 2, 2), np.float32)
    with pytest.raises(ops.ShapeError):
        ops.conv2d_forward(small, np.ones((1, 1, 3, 3), np.float32),
                           np.zeros(1, np.float32))


def test_conv_backward_finite_differences(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(2)
    g = rng.standard_normal((2, 2, 5, 5))

    gx, gw, gb = ops.conv2d_backward(g, x, w)
    loss = lambda arr, which: float(
        np.sum(ops.conv2d_forward(
            arr if which == "x" else x,
            arr if which == "w" else w,
            arr if which == "b" else b) * g))
    assert oracles.rel_err(gx, oracles.fd_gradient(lambda a: loss(a, "x"), x.copy())) < 1e-6
    assert oracles.rel_err(gw, oracles.fd_gradient(lambda a: loss(a, "w"), w.copy())) < 1e-6
    assert oracles.rel_err(gb, oracles.fd_gradient(lambda a: loss(a, "b"), b.copy())) < 1e-6


def test_reflect_pad_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    p = ops.pad_spatial(x, 1, "reflect")
    # mirror excluding the edge sample itself
    assert p[0, 0, 0, 1] == x[0, 0, 1, 0]
    assert p[0, 0, 1, 0] == x[0, 0, 0, 1]
    assert p[0, 0, -1, -1] == x[0, 0, 2, 2]
    assert p.shape == (1, 1, 6, 6)


def test_reflect_pad_backward_finite_differences(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    g = rng.standard_normal((1, 2, 7, 8))
    gx = ops.pad_spatial_backward(g, 1, "reflect")
    want = oracles.fd_gradient(
        lambda a: float(np.sum(ops.pad_spatial(a, 1, "reflect") * g)), x.copy())
    assert oracles.rel_err(gx, want) < 1e-6


def test_leaky_relu_values_and_gradient(rng):
    x = np.array([-1.0, 0.0, 2.0], np.float32)
    y = ops.leaky_relu_forward(x, 0.2)
    np.testing.assert_allclose(y, [-0.2, 0.0, 2.0], rtol=1e-7, atol=0)
    xs = rng.standard_normal(64) + 0.05  # keep away from the kink
    g = rng.standard_normal(64)
    gx = ops.leaky_relu_backward(g, xs, 0.2)
    want = oracles.fd_gradient(
        lambda a: float(np.sum(ops.leaky_relu_forward(a, 0.2) * g)), xs.copy())
    assert oracles.rel_err(gx, want) < 1e-6


def test_sigmoid_values_and_gradient(rng):
    assert ops.sigmoid_forward(np.zeros(1))[0] == 0.5
    big = ops.sigmoid_forward(np.array([88.0, -88.0]))
    assert 0.0 < big[1] < 1e-30 and 1.0 - big[0] < 1e-30
    x = rng.standard_normal(32)
    g = rng.standard_normal(32)
    y = ops.sigmoid_forward(x)
    gx = ops.sigmoid_backward(g, y)
    want = oracles.fd_gradient(
        lambda a: float(np.sum(ops.sigmoid_forward(a) * g)), x.copy())
    assert oracles.rel_err(gx, want) < 1e-6


def test_maxpool_values_and_tie_break(rng):
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2)
    y, idx = ops.maxpool2_forward(x)
    assert y[0, 0, 0, 0] == 4.0
    const = np.ones((1, 1, 4, 4), np.float32)
    y, idx = ops.maxpool2_forward(const)
    np.testing.assert_allclose(y, np.ones((1, 1, 2, 2)), rtol=0, atol=0)
    assert (idx == 0).all()  # first window element wins ties
    g = np.ones_like(y)
    gx = ops.maxpool2_backward(g, idx, const.shape)
    assert gx[0, 0, 0, 0] == 1.0 and gx[0, 0, 0, 1] == 0.0

    r = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    y, _ = ops.maxpool2_forward(r)
    np.testing.assert_allclose(y, oracles.maxpool2_loop(r), rtol=0, atol=0)


def test_maxpool_odd_dims_error():
    with pytest.raises(ops.ShapeError):
        ops.maxpool2_forward(np.zeros((1, 1, 5, 4), np.float32))


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    y, idx = ops.maxpool2_forward(x)
    g = rng.standard_normal(y.shape)
    gx = ops.maxpool2_backward(g, idx, x.shape)
    want = oracles.fd_gradient(
        lambda a: float(np.sum(ops.maxpool2_forward(a)[0] * g)), x.copy())
    assert oracles.rel_err(gx, want) < 1e-6


def test_sobel_kernels():
    w = ops.sobel_kernel_stack(np.float32)
    assert w.shape == (2, 1, 3, 3)
    np.testing.assert_allclose(w[0, 0], [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    np.testing.assert_allclose(w[1, 0], np.asarray(w[0, 0]).T)


def test_sobel_gradient_constant_is_zero():
    g = ops.sobel_gradient(np.full((1, 1, 8, 8), 0.7, np.float32))
    np.testing.assert_allclose(g, 0.0, atol=1e-6)


def test_elementwise_max(rng):
    a = rng.random((3, 4))
    b = rng.random((3, 4))
    m = ops.elementwise_max(a, b)
    assert (m >= a).all() and (m >= b).all()
    assert ((m == a) | (m == b)).all()
