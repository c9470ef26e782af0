"""Reverse-mode automatic differentiation over float64 numpy arrays.

Small tape-based engine covering exactly the operations the models need.
Reductions that aggregate graph elements (segment sums, attention) accumulate
in a value-canonical order so that permuting nodes of a molecule permutes
outputs bitwise-exactly; see ``canonical_segment_sum``.
"""

from __future__ import annotations

import numpy as np


def _as_f64(x) -> np.ndarray:
    # no ascontiguousarray: it would promote 0-d scalars to 1-d
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the autodiff tape wrapping a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward = backward if requires_grad else None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def leaf(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward pass ---------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        seed = _as_f64(seed)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        # iterative topological order; recursion depth is unbounded otherwise
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 0 visiting, 1 done
        stack: list[Tensor] = [self]
        while stack:
            node = stack[-1]
            nid = id(node)
            if state.get(nid) == 1:
                stack.pop()
                continue
            if state.get(nid) == 0:
                state[nid] = 1
                order.append(node)
                stack.pop()
                continue
            state[nid] = 0
            for p in node._parents:
                if p.requires_grad and state.get(id(p)) != 1:
                    stack.append(p)

        self.grad = seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(p for p in parents), backward=backward if req else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def pow_scalar(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accum(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out_data, (a,), backward)


def absolute(a) -> Tensor:
    """|a|; subgradient 0 at exactly 0."""
    a = _wrap(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.data > 0.0
    out_data = np.where(keep, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * keep)

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), numerically stable; derivative sigmoid(a)."""
    a = _wrap(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            x = a.data
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accum(g * s)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape / indexing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _wrap(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(a.data[sl])

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = g
            a._accum(buf)

    return _make(out_data, (a,), backward)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            a._accum(buf)

    return _make(out_data, (a,), backward)


def select_mask(a, mask: np.ndarray) -> Tensor:
    """Boolean-mask selection to a 1-D vector; backward scatters."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {a.data.shape}")
    out_data = a.data[mask]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[mask] = g
            a._accum(buf)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and matmul
# ---------------------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = _wrap(a)
    out_data = np.array(np.sum(a.data))

    def backward(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out_data = np.array(np.sum(a.data) / n)

    def backward(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.shape[axis]
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg / n, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def position_independent_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose per-row results do not depend on row position.

    BLAS gemm kernels round differently at micro-tile tails, so ``a @ b`` can
    give a row different low bits depending on where it sits in the matrix;
    that breaks bitwise permutation equivariance of node-indexed matrices.
    The einsum sum-of-products path accumulates over the contraction axis in
    a fixed order per output element, so each row's result is a pure function
    of its values. Roughly 4x slower than BLAS; used for all forward products.
    """
    return np.einsum("...ik,...kj->...ij", a, b, optimize=False)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics.

    The forward value is computed position-independently (see
    ``position_independent_matmul``); gradients only feed optimizer steps and
    finite-difference checks at 1e-5, so the backward pass keeps BLAS speed.
    """
    a, b = _wrap(a), _wrap(b)
    out_data = position_independent_matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# order-canonical reductions
# ---------------------------------------------------------------------------


def _bytewise_row_order(rows: np.ndarray) -> np.ndarray:
    """Stable order of rows by their raw bytes: a total order that depends only
    on row values, hence permutation-covariant."""
    a = np.ascontiguousarray(rows)
    if a.ndim != 2:
        raise ValueError("need a 2-D array")
    if a.shape[1] == 0:
        return np.arange(a.shape[0])
    v = a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).ravel()
    return np.argsort(v, kind="stable")


def canonical_segment_sum(values, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``values`` grouped by segment id, accumulating each segment
    in a value-canonical order.

    Ordinary segment sums accumulate in storage order, so relabeling graph
    nodes changes rounding. Sorting each segment's rows bytewise first makes
    the summand sequence, and therefore the float result, depend only on the
    multiset of row values.
    """
    values = _wrap(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 2 or seg.shape != (values.data.shape[0],):
        raise ValueError("values must be (n, d) with one segment id per row")
    d = values.data.shape[1]
    out_data = np.zeros((n_segments, d), dtype=np.float64)
    if values.data.shape[0] > 0:
        o1 = _bytewise_row_order(values.data)
        o2 = np.argsort(seg[o1], kind="stable")
        order = o1[o2]
        vs = values.data[order]
        ss = seg[order]
        starts = np.flatnonzero(np.concatenate(([True], ss[1:] != ss[:-1])))
        sums = np.add.reduceat(vs, starts, axis=0)
        out_data[ss[starts]] = sums

    def backward(g):
        if values.requires_grad:
            values._accum(g[seg])

    return _make(out_data, (values,), backward)


def masked_softmax_canonical(logits, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``valid`` positions.

    The denominator is accumulated over value-sorted summands so the result is
    invariant to permutations of the last axis. Rows with no valid position
    are an error (an attention query must see at least one key).
    """
    logits = _wrap(logits)
    valid = np.asarray(valid, dtype=bool)
    valid = np.broadcast_to(valid, logits.data.shape)
    if not valid.any(axis=-1).all():
        raise ValueError("softmax row with all positions masked")
    x = np.where(valid, logits.data, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.where(valid, np.exp(x - m), 0.0)
    denom = np.sum(np.sort(e, axis=-1), axis=-1, keepdims=True)
    out_data = e / denom

    def backward(g):
        if logits.requires_grad:
            p = out_data
            inner = np.sum(g * p, axis=-1, keepdims=True)
            logits._accum(np.where(valid, p * (g - inner), 0.0))

    return _make(out_data, (logits,), backward)


def weighted_sum_canonical(weights, values) -> Tensor:
    """Attention application z[..., i, c] = sum_j w[..., i, j] * v[..., j, c],
    accumulating over j in value-sorted order (permutation-exact)."""
    weights, values = _wrap(weights), _wrap(values)
    w = weights.data
    v = values.data
    prod = w[..., :, :, None] * v[..., None, :, :]
    out_data = np.sum(np.sort(prod, axis=-2), axis=-2)

    def backward(g):
        if weights.requires_grad:
            gw = np.einsum("...ic,...jc->...ij", g, v)
            weights._accum(_unbroadcast(gw, w.shape))
        if values.requires_grad:
            gv = np.einsum("...ij,...ic->...jc", w, g)
            values._accum(_unbroadcast(gv, v.shape))

    return _make(out_data, (weights, values), backward)


def bucket_bias(table, buckets: np.ndarray) -> Tensor:
    """Expand a (heads, n_buckets) bias table to (heads, N, N) via an integer
    bucket matrix; backward scatter-adds into the table."""
    table = _wrap(table)
    buckets = np.asarray(buckets, dtype=np.int64)
    out_data = table.data[:, buckets]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            flat = g.reshape(table.data.shape[0], -1)
            np.add.at(buf.T, buckets.ravel(), flat.T)
            table._accum(buf)

    return _make(out_data, (table,), backward)


def dropout_mask(a, keep: np.ndarray, scale: float) -> Tensor:
    """Apply a precomputed keep mask with survivor rescaling."""
    a = _wrap(a)
    factor = keep.astype(np.float64) * scale
    out_data = a.data * factor

    def backward(g):
        if a.requires_grad:
            a._accum(g * factor)

    return _make(out_data, (a,), backward)


def layer_normalize(x, gain, bias, eps: float) -> Tensor:
    """Row-wise normalization over the last axis, fused into one tape node.

    Equivalent to composing mean/var/div/affine primitives but with one
    analytic backward; the composed form dominated forward time with
    temporaries. Per-row reductions keep permutation exactness.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out_data = xn * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            gain._accum(np.sum(g * xn, axis=red))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            bias._accum(np.sum(g, axis=red))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = np.mean(gy * xn, axis=-1, keepdims=True)
            x._accum(inv * (gy - m1 - xn * m2))

    return _make(out_data, (x, gain, bias), backward)
