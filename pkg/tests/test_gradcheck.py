import numpy as np
import pytest

from brassica_cnn import gradcheck as G
from brassica_cnn.net import (
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    PoolSpec,
    ReluSpec,
    SoftmaxSpec,
    build_mini_net,
    layer_backward,
)
from brassica_cnn.tensor import NumericError, Rng

SEEDS = range(20)
LAYER_TOL = 1e-6


def rand(rng, *shape, scale=1.0):
    return (rng.random(int(np.prod(shape))).reshape(shape) * 2 - 1) * scale


def test_relative_error_floor():
    assert G.relative_error([0.0], [1e-9]) == pytest.approx(1e-3)
    assert G.relative_error([2.0], [1.0]) == 0.5
    with pytest.raises(NumericError):
        G.relative_error([np.nan], [0.0])


def test_numeric_grad_of_cubic():
    x = np.array([0.5, -1.5, 2.0])
    vals, ok = G.numeric_grad(lambda: float(np.sum(x**3)), x, np.arange(3), 1e-3)
    np.testing.assert_allclose(vals, 3 * np.array([0.5, -1.5, 2.0]) ** 2, rtol=1e-10)
    assert ok.all()
    assert x.tolist() == [0.5, -1.5, 2.0]


@pytest.mark.parametrize("seed", SEEDS)
def test_dense(seed):
    rng = Rng(seed)
    params = {"weight": rand(rng, 3, 4), "bias": rand(rng, 3)}
    assert float(G.gradient_check(DenseSpec(4, 3), rand(rng, 2, 4, 1, 1), params, seed=seed)) < LAYER_TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kernel,stride,pad", [(3, 1, 0), (3, 1, 1), (5, 3, 0), (5, 2, 2)])
def test_conv(seed, kernel, stride, pad):
    rng = Rng(seed)
    params = {"weight": rand(rng, 3, 2, kernel, kernel), "bias": rand(rng, 3)}
    x = rand(rng, 2, 2, 7, 7)
    res = G.gradient_check(ConvSpec(2, 3, kernel, stride, pad), x, params, seed=seed)
    assert res.max_rel_error < LAYER_TOL and res.skipped == 0


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("window,stride", [(2, 2), (3, 3), (3, 2)])
def test_pool(seed, window, stride):
    x = rand(Rng(seed), 2, 2, 7, 7)
    assert G.gradient_check(PoolSpec(window, stride), x, seed=seed).max_rel_error < LAYER_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_away_from_zero(seed):
    x = rand(Rng(seed), 2, 3, 4, 4)
    x[np.abs(x) < 1e-2] = 0.5
    assert G.gradient_check(ReluSpec(), x, seed=seed).max_rel_error < LAYER_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_and_flatten(seed):
    x = rand(Rng(seed), 2, 3, 2, 2)
    assert G.gradient_check(DropoutSpec(0.5), x, seed=seed, train=True).max_rel_error < LAYER_TOL
    assert G.gradient_check(FlattenSpec(), x, seed=seed).max_rel_error < LAYER_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_alone_and_with_ce(seed):
    rng = Rng(seed)
    z = rand(rng, 3, 5, 1, 1, scale=3.0)
    assert G.gradient_check(SoftmaxSpec(), z, seed=seed).max_rel_error < LAYER_TOL
    labels = [rng.integer(5) for _ in range(3)]
    assert G.softmax_ce_check(z.reshape(3, 5), labels).max_rel_error < LAYER_TOL


def test_check_catches_a_wrong_backward(monkeypatch):
    import brassica_cnn.gradcheck as mod

    def broken(spec, cache, params, upstream):
        lg = layer_backward(spec, cache, params, upstream)
        lg.param_grads["weight"] = lg.param_grads["weight"] * 1.01
        return lg

    monkeypatch.setattr(mod, "layer_backward", broken)
    rng = Rng(0)
    params = {"weight": rand(rng, 3, 4), "bias": rand(rng, 3)}
    assert G.gradient_check(DenseSpec(4, 3), rand(rng, 2, 4, 1, 1), params).max_rel_error > 1e-3


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        G.gradient_check(ReluSpec(), np.ones((1, 1, 1, 1)), step=0.0)


def test_network_check_mini16_single_seed():
    net = build_mini_net(Rng(0), 16, dtype=np.float64)
    rng = Rng(100)
    for group in net.params:
        if "bias" in group:
            group["bias"][:] = rand(rng, *group["bias"].shape, scale=0.1)
    x = rand(rng, 4, 3, 16, 16)
    res = G.network_check(net, x, [0, 3, 5, 9], max_coords=30)
    assert res.max_rel_error < 1e-4
    assert res.checked > 100
