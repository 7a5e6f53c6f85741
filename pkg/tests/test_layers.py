import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brassica_cnn import layers as L
from brassica_cnn.tensor import NumericError, Rng, ShapeError


def conv_params(rng, cin, cout, k, stride=1, pad=0, dtype=np.float64):
    w = rng.random(cout * cin * k * k).reshape(cout, cin, k, k) * 2 - 1
    b = rng.random(cout) * 2 - 1
    return L.ConvParams(w.astype(dtype), b.astype(dtype), stride, pad)


def rand(rng, *shape):
    return rng.random(int(np.prod(shape))).reshape(shape) * 2 - 1


# ---------------------------------------------------------------- conv
def test_conv_scalar_example():
    x = np.array([3.0]).reshape(1, 1, 1, 1)
    p = L.ConvParams(np.array([2.0]).reshape(1, 1, 1, 1), np.array([1.0]))
    assert L.conv2d_forward(x, p).ravel().tolist() == [7.0]
    g = L.conv2d_backward(x, p, np.ones((1, 1, 1, 1)))
    assert g.param_grads["weight"].ravel().tolist() == [3.0]
    assert g.param_grads["bias"].tolist() == [1.0]
    assert g.input_grad.ravel().tolist() == [2.0]


def test_conv_output_extent_128():
    assert L.out_extent(128, 5, 3) == 42
    p = L.ConvParams(np.zeros((2, 3, 5, 5), np.float32), np.zeros(2, np.float32), 3, 0)
    assert p.output_hw(128, 128) == (42, 42)


def test_conv_matches_loops_small():
    rng = Rng(11)
    x = rand(rng, 1, 2, 4, 4)
    p = conv_params(rng, 2, 3, 3)
    np.testing.assert_allclose(L.conv2d_forward(x, p), L.conv2d_reference(x, p), atol=1e-12)


def test_conv_reference_is_an_honest_loop():
    # hand-computed 2x2 valid correlation
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.array([[1.0, 0.0], [0.0, -1.0]]).reshape(1, 1, 2, 2)
    p = L.ConvParams(w, np.zeros(1))
    assert L.conv2d_reference(x, p).ravel().tolist() == [-4.0, -4.0, -4.0, -4.0]


@pytest.mark.parametrize("k", [3, 5])
def test_delta_kernel_is_identity(k):
    rng = Rng(k)
    x = rand(rng, 2, 3, 7, 6).astype(np.float32)
    w = np.zeros((3, 3, k, k), np.float32)
    for c in range(3):
        w[c, c, k // 2, k // 2] = 1.0
    p = L.ConvParams(w, np.zeros(3, np.float32), 1, (k - 1) // 2)
    assert np.array_equal(L.conv2d_forward(x, p), x)


def test_conv_zero_upstream_gives_zero_grads():
    rng = Rng(2)
    x = rand(rng, 2, 2, 6, 6)
    p = conv_params(rng, 2, 3, 3, 1, 1)
    g = L.conv2d_backward(x, p, np.zeros((2, 3, 6, 6)))
    assert not g.input_grad.any() and not g.param_grads["weight"].any() and not g.param_grads["bias"].any()


def test_conv_errors():
    rng = Rng(0)
    p = conv_params(rng, 2, 3, 3)
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 3, 5, 5)), p)
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 2, 2)), p)
    with pytest.raises(ShapeError):
        L.conv2d_backward(np.zeros((1, 2, 5, 5)), p, np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        L.ConvParams(np.zeros((3, 2, 3, 3)), np.zeros(2))


def test_im2col_col2im_are_adjoint():
    rng = Rng(4)
    x = rand(rng, 2, 3, 9, 8)
    cols = L.im2col(x, (3, 3), (2, 2), (1, 1))
    c = rand(rng, *cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * L.col2im(c, x.shape, (3, 3), (2, 2), (1, 1)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_chunking_does_not_change_results(monkeypatch):
    rng = Rng(9)
    x = rand(rng, 5, 2, 8, 8)
    p = conv_params(rng, 2, 4, 3, 1, 1)
    up = rand(rng, 5, 4, 8, 8)
    whole_y = L.conv2d_forward(x, p)
    whole_g = L.conv2d_backward(x, p, up)
    monkeypatch.setattr(L, "CHUNK_ELEMENTS", 1)
    np.testing.assert_allclose(L.conv2d_forward(x, p), whole_y, atol=1e-13)
    g = L.conv2d_backward(x, p, up)
    np.testing.assert_allclose(g.input_grad, whole_g.input_grad, atol=1e-13)
    np.testing.assert_allclose(g.param_grads["weight"], whole_g.param_grads["weight"], atol=1e-12)


def test_even_slices():
    assert L.even_slices(10, 4) == [slice(0, 3), slice(3, 6), slice(6, 10)]
    assert L.even_slices(3, 100) == [slice(0, 3)]
    assert L.even_slices(5, 0) == [slice(i, i + 1) for i in range(5)]


@settings(max_examples=60, deadline=None)
@given(size=st.integers(1, 20), k=st.sampled_from([3, 5]), stride=st.integers(1, 4), pad=st.integers(0, 2))
def test_output_extent_formula(size, k, stride, pad):
    if size + 2 * pad < k:
        with pytest.raises(ShapeError):
            L.ConvParams(np.zeros((1, 1, k, k)), np.zeros(1), stride, pad).output_hw(size, size)
        return
    expected = (size + 2 * pad - k) // stride + 1
    x = np.zeros((1, 1, size, size))
    y = L.conv2d_forward(x, L.ConvParams(np.zeros((1, 1, k, k)), np.zeros(1), stride, pad))
    assert y.shape == (1, 1, expected, expected)
    if pad == 0 and size >= k:
        pooled, _ = L.maxpool_forward(x, L.PoolParams(k, stride))
        assert pooled.shape[2] == expected


# ---------------------------------------------------------------- pooling
def test_pool_example_and_routing():
    x = np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)
    y, rec = L.maxpool_forward(x, L.PoolParams(2, 2))
    assert y.ravel().tolist() == [4.0]
    assert rec.argmax.ravel().tolist() == [2]  # row 1, col 0
    dx = L.maxpool_backward(rec, np.array([5.0]).reshape(1, 1, 1, 1))
    assert dx.reshape(2, 2).tolist() == [[0, 0], [5, 0]]
    assert not L.maxpool_backward(rec, np.zeros((1, 1, 1, 1))).any()


def test_pool_constant_and_ties():
    x = np.full((2, 3, 42, 42), 7.0, np.float32)
    y, rec = L.maxpool_forward(x, L.PoolParams(3, 3))
    assert y.shape == (2, 3, 14, 14) and np.all(y == 7.0)
    # ties resolve to the first (top-left) element of each window
    assert rec.argmax[0, 0, 0, 0] == 0 and rec.argmax[0, 0, 1, 1] == 3 * 42 + 3


def test_pool_overlapping_windows_accumulate():
    x = np.array([[0.0, 9.0, 0.0]]).reshape(1, 1, 1, 3)
    _, rec = L.maxpool_forward(x, L.PoolParams((1, 2), (1, 1)))
    dx = L.maxpool_backward(rec, np.ones((1, 1, 1, 2)))
    assert dx.ravel().tolist() == [0.0, 2.0, 0.0]


def test_pool_errors():
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 2, 2)), L.PoolParams(3, 3))
    _, rec = L.maxpool_forward(np.zeros((1, 1, 4, 4)), L.PoolParams(2, 2))
    with pytest.raises(ShapeError):
        L.maxpool_backward(rec, np.zeros((1, 1, 3, 3)))


# ---------------------------------------------------------------- relu / dropout
def test_relu():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert L.relu(x).ravel().tolist() == [0.0, 0.0, 2.0]
    assert L.relu_backward(x, np.ones_like(x)).ravel().tolist() == [0.0, 0.0, 1.0]
    pos = np.array([0.5, 3.0]).reshape(1, 1, 1, 2)
    assert np.array_equal(L.relu(pos), pos)
    up = np.array([4.0, -2.0]).reshape(1, 1, 1, 2)
    assert np.array_equal(L.relu_backward(pos, up), up)


def test_dropout_modes():
    x = np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32)
    y, mask = L.dropout(x, L.DropoutParams(0.5, train=False), None)
    assert y is x and mask is None
    rng = Rng(1)
    before = rng.getstate()
    y, mask = L.dropout(x, L.DropoutParams(0.0, train=True), rng)
    assert np.array_equal(y, x) and rng.getstate() == before
    with pytest.raises(ValueError):
        L.DropoutParams(1.0)


def test_dropout_statistics():
    x = np.ones((1, 1, 1, 100_000), np.float32)
    y, mask = L.dropout(x, L.DropoutParams(0.5, train=True), Rng(123))
    assert 0.98 <= y.mean() <= 1.02
    assert set(np.unique(y).tolist()) == {0.0, 2.0}
    assert np.array_equal(L.dropout_backward(mask, x), y)


# ---------------------------------------------------------------- dense / softmax
def test_dense_examples():
    p = L.DenseParams(np.eye(2), np.zeros(2))
    assert L.dense_forward(np.array([[3.0, 5.0]]), p).ravel().tolist() == [3.0, 5.0]
    p = L.DenseParams(np.array([[1.0, 1.0]]), np.array([1.0]))
    assert L.dense_forward(np.array([[2.0, 3.0]]), p).ravel().tolist() == [6.0]
    with pytest.raises(ShapeError):
        L.dense_forward(np.array([[1.0, 2.0, 3.0]]), p)


def test_dense_backward_formulae():
    rng = Rng(5)
    x, w, b, up = rand(rng, 3, 4), rand(rng, 2, 4), rand(rng, 2), rand(rng, 3, 2)
    g = L.dense_backward(x, L.DenseParams(w, b), up)
    np.testing.assert_allclose(g.param_grads["weight"], up.T @ x)
    np.testing.assert_allclose(g.param_grads["bias"], up.sum(0))
    np.testing.assert_allclose(g.input_grad, up @ w)


def test_softmax_examples():
    p = L.softmax(np.zeros((1, 10)))
    np.testing.assert_allclose(p, 0.1, atol=1e-15)
    p = L.softmax(np.array([[0.0, math.log(2.0)]]))
    np.testing.assert_allclose(p, [[1 / 3, 2 / 3]], atol=1e-15)
    z = np.random.default_rng(3).normal(size=(4, 10))
    np.testing.assert_allclose(L.softmax(z), L.softmax(z + 100.0), atol=1e-6)
    # large logits stay finite thanks to max subtraction
    assert np.all(np.isfinite(L.softmax(np.array([[1000.0, 0.0]]))))
    with pytest.raises(NumericError):
        L.softmax(np.array([[np.nan, 0.0]]))
