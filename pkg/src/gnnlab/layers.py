"""Layer primitives with exact reverse-mode gradients.

Two surfaces: composable functions over :class:`~gnnlab.tensor.Tensor` (used
by the model code), and a functional ``layer_forward``/``layer_backward`` pair
over raw arrays for callers that hold parameters themselves.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYERNORM_EPS = 1e-5

LAYER_KINDS = ("linear", "mlp2", "layernorm", "dropout", "relu")


class RngStream:
    """Counter-based randomness: masks depend only on (seed, epoch, batch, path).

    Independent of evaluation order, so parallel or re-ordered forward passes
    draw identical dropout masks.
    """

    def __init__(self, seed: int, epoch: int = 0, batch: int = 0):
        self.seed = int(seed)
        self.epoch = int(epoch)
        self.batch = int(batch)

    def generator(self, path: str) -> np.random.Generator:
        key = zlib.crc32(path.encode("utf-8"))
        return np.random.default_rng(
            np.random.SeedSequence((self.seed, self.epoch, self.batch, key)))


# ---------------------------------------------------------------------------
# Tensor-level layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {w.shape[0]}")
    return T.add(T.matmul(x, w), b)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(T.relu(linear(x, w1, b1)), w2, b2)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    return T.layer_normalize(x, gain, bias, eps)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    return T.dropout_mask(x, keep, 1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# Functional contract over raw arrays
# ---------------------------------------------------------------------------


def _leafify(params: dict, names) -> dict:
    leaves = {}
    for name in names:
        if name not in params:
            raise ValueError(f"missing param {name!r}")
        leaves[name] = Tensor.leaf(params[name])
    return leaves


def layer_forward(kind: str, x, params: dict | None = None, mode: str = "eval",
                  rng_stream: RngStream | None = None, path: str = "layer"):
    """Run one layer on a raw array; returns (output array, residuals).

    ``residuals`` feed :func:`layer_backward`. Raises on unknown kinds, shape
    mismatches, and non-finite input.
    """
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    params = params or {}
    x_arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x_arr).all():
        raise ValueError(f"{kind}: non-finite input")
    x_t = Tensor.leaf(x_arr)

    if kind == "linear":
        leaves = _leafify(params, ("w", "b"))
        out = linear(x_t, leaves["w"], leaves["b"])
    elif kind == "mlp2":
        leaves = _leafify(params, ("w1", "b1", "w2", "b2"))
        out = mlp2(x_t, leaves["w1"], leaves["b1"], leaves["w2"], leaves["b2"])
    elif kind == "layernorm":
        leaves = _leafify(params, ("gain", "bias"))
        out = layernorm(x_t, leaves["gain"], leaves["bias"])
    elif kind == "dropout":
        leaves = {}
        rng = rng_stream.generator(path) if rng_stream is not None else None
        out = dropout(x_t, float(params.get("p", 0.0)), mode, rng)
    else:  # relu
        leaves = {}
        out = T.relu(x_t)

    residuals = (x_t, leaves, out)
    return out.data, residuals


def layer_backward(kind: str, grad_out, residuals):
    """Exact gradients for a matching forward call: (grad_in, param grads)."""
    x_t, leaves, out = residuals
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != out.data.shape:
        raise ValueError(f"stale residuals: grad shape {g.shape} != output shape {out.data.shape}")
    out.backward(g)
    grad_in = x_t.grad if x_t.grad is not None else np.zeros_like(x_t.data)
    param_grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                   for name, leaf in leaves.items()}
    return grad_in, param_grads
