import numpy as np
import pytest

import gnnlab.tensor as T
from gnnlab.layers import (LAYER_KINDS, RngStream, dropout, layer_backward,
                           layer_forward, linear, mlp2)
from gnnlab.tensor import Tensor

from oracles import central_difference, relative_error


def layer_params(kind, rng, d=7):
    if kind == "linear":
        return {"w": rng.normal(size=(d, 5)), "b": rng.normal(size=5)}
    if kind == "mlp2":
        return {"w1": rng.normal(size=(d, 6)), "b1": rng.normal(size=6),
                "w2": rng.normal(size=(6, 3)), "b2": rng.normal(size=3)}
    if kind == "layernorm":
        return {"gain": rng.normal(size=d), "bias": rng.normal(size=d)}
    if kind == "dropout":
        return {"p": 0.3}
    return {}


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    x = rng.normal(size=(5, 7)) + 0.05  # nudge off the relu kink
    params = layer_params(kind, rng)
    stream = RngStream(seed=12, epoch=1, batch=2)
    out, residuals = layer_forward(kind, x, params, mode="train",
                                   rng_stream=stream, path="probe")
    g_out = rng.normal(size=out.shape)
    grad_in, param_grads = layer_backward(kind, g_out, residuals)

    def value():
        y, _ = layer_forward(kind, x, params, mode="train", rng_stream=stream,
                             path="probe")
        return float(np.sum(y * g_out))

    worst = 0.0
    flat = rng.choice(x.size, size=8, replace=False)
    for i in flat:
        idx = np.unravel_index(i, x.shape)
        worst = max(worst, relative_error(central_difference(value, x, idx),
                                          float(grad_in[idx])))
    for name, grad in param_grads.items():
        arr = params[name]
        for i in rng.choice(arr.size, size=min(6, arr.size), replace=False):
            idx = np.unravel_index(i, arr.shape)
            worst = max(worst, relative_error(central_difference(value, arr, idx),
                                              float(grad[idx])))
    assert worst < 1e-6, f"{kind}: finite differences disagree ({worst})"


def test_linear_grad_in_is_g_w_transpose():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    x = rng.normal(size=(2, 4))
    out, residuals = layer_forward("linear", x, params)
    g = rng.normal(size=out.shape)
    grad_in, _ = layer_backward("linear", g, residuals)
    assert np.allclose(grad_in, g @ params["w"].T, atol=1e-14)


def test_relu_backward_zero_at_negative_inputs():
    x = np.array([[-2.0, 3.0, -0.5]])
    out, residuals = layer_forward("relu", x)
    grad_in, _ = layer_backward("relu", np.ones_like(out), residuals)
    assert grad_in.tolist() == [[0.0, 1.0, 0.0]]


def test_layernorm_constant_row_maps_to_bias():
    gain = np.ones(4)
    out, _ = layer_forward("layernorm", np.full((2, 4), 7.0),
                           {"gain": gain, "bias": np.zeros(4)})
    assert np.allclose(out, 0.0, atol=1e-12)


def test_layernorm_row_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(6, 32))
    out, _ = layer_forward("layernorm", x, {"gain": np.ones(32), "bias": np.zeros(32)})
    assert np.abs(out.mean(axis=1)).max() < 1e-12
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4  # eps=1e-5 shifts variance


def test_mlp2_is_linear_relu_linear():
    rng = np.random.default_rng(2)
    p = layer_params("mlp2", rng)
    x = rng.normal(size=(3, 7))
    via_kind, _ = layer_forward("mlp2", x, p)
    leaves = {k: Tensor.leaf(v) for k, v in p.items()}
    manual = linear(T.relu(linear(Tensor.leaf(x), leaves["w1"], leaves["b1"])),
                    leaves["w2"], leaves["b2"])
    assert (via_kind == manual.data).all()


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


def test_dropout_identity_cases():
    x = Tensor.leaf(np.ones((3, 3)))
    assert dropout(x, 0.0, "train", np.random.default_rng(0)) is x
    assert dropout(x, 0.5, "eval", None) is x


def test_dropout_train_mode_rescales():
    rng = np.random.default_rng(7)
    x = Tensor.leaf(np.ones(100_000))
    out = dropout(x, 0.1, "train", rng).data
    survivors = out[out != 0.0]
    assert np.allclose(survivors, 1.0 / 0.9)
    assert 0.99 < out.mean() < 1.01  # rescaling keeps the expectation


def test_dropout_mask_reused_in_backward():
    stream = RngStream(seed=5)
    x = np.ones((4, 4))
    out, residuals = layer_forward("dropout", x, {"p": 0.5}, mode="train",
                                   rng_stream=stream, path="d")
    grad_in, _ = layer_backward("dropout", np.ones_like(out), residuals)
    assert ((out != 0.0) == (grad_in != 0.0)).all()


def test_dropout_validation():
    x = Tensor.leaf(np.ones(2))
    with pytest.raises(ValueError):
        dropout(x, 1.0, "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        dropout(x, 0.5, "test", np.random.default_rng(0))
    with pytest.raises(ValueError):
        dropout(x, 0.5, "train", None)


# ---------------------------------------------------------------------------
# Seeded stream
# ---------------------------------------------------------------------------


def test_rng_stream_is_reproducible_and_path_keyed():
    a = RngStream(seed=3, epoch=1, batch=4).generator("core.0.drop").random(8)
    b = RngStream(seed=3, epoch=1, batch=4).generator("core.0.drop").random(8)
    c = RngStream(seed=3, epoch=1, batch=4).generator("core.1.drop").random(8)
    d = RngStream(seed=3, epoch=1, batch=5).generator("core.0.drop").random(8)
    assert (a == b).all()
    assert not (a == c).all()
    assert not (a == d).all()


# ---------------------------------------------------------------------------
# Functional contract errors
# ---------------------------------------------------------------------------


def test_unknown_layer_kind():
    with pytest.raises(ValueError, match="unknown layer kind"):
        layer_forward("conv", np.ones((2, 2)))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        layer_forward("relu", np.array([[np.nan]]))


def test_missing_param_rejected():
    with pytest.raises(ValueError, match="missing param"):
        layer_forward("linear", np.ones((2, 3)), {"w": np.ones((3, 2))})


def test_stale_residuals_rejected():
    out, residuals = layer_forward("relu", np.ones((2, 2)))
    with pytest.raises(ValueError, match="stale"):
        layer_backward("relu", np.ones((3, 3)), residuals)
