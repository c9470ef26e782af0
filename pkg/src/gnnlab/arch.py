"""Model architectures: MPNN++ blocks, biased-attention Transformer blocks,
and the hybrid GPS block, assembled into multi-task networks with named
parameters and activation taps.

Molecules in a batch are packed into one node/edge table (block-diagonal
layout); attention runs per molecule since graphs are tiny. All reductions
over graph elements use value-canonical accumulation so node relabelings
reproduce outputs bitwise.
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import RngStream, dropout, layernorm, linear, mlp2
from .molgraph import EDGE_FEATURE_DIM, NODE_FEATURE_DIM, DatasetMix, MolGraph, featurize
from .optim import Param, ParamSpec, mup_scale
from .pse import PSEConfig, build_pse_features

ARCH_KINDS = ("mpnn", "transformer", "gps")
UNREACHABLE_BIAS = -1e4


@dataclass(frozen=True)
class TaskHeadSpec:
    name: str
    out_dim: int
    level: str  # "graph" | "node"

    def __post_init__(self):
        if self.level not in ("graph", "node"):
            raise ValueError(f"bad level {self.level!r}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    arch_kind: str
    width: int
    task_heads: tuple
    depth: int = 16
    n_heads: int = 8
    dropout_p: float = 0.1
    pse: PSEConfig = field(default_factory=PSEConfig)
    width_multiplier: float = 1.0
    depth_multiplier: float = 1.0
    d_max: int = 5
    node_feat_dim: int = NODE_FEATURE_DIM
    edge_feat_dim: int = EDGE_FEATURE_DIM

    def __post_init__(self):
        if self.arch_kind not in ARCH_KINDS:
            raise ValueError(f"arch_kind must be one of {ARCH_KINDS}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.arch_kind in ("transformer", "gps") and self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must be in [0, 1)")
        if not self.task_heads:
            raise ValueError("need at least one task head")

    @property
    def node_in_dim(self) -> int:
        return self.node_feat_dim + self.pse.width

    @property
    def n_buckets(self) -> int:
        return self.d_max + 2  # distances 0..d_max plus unreachable


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "arch_kind": spec.arch_kind,
        "width": spec.width,
        "depth": spec.depth,
        "n_heads": spec.n_heads,
        "dropout_p": spec.dropout_p,
        "width_multiplier": spec.width_multiplier,
        "depth_multiplier": spec.depth_multiplier,
        "d_max": spec.d_max,
        "node_feat_dim": spec.node_feat_dim,
        "edge_feat_dim": spec.edge_feat_dim,
        "pse": {"rw_steps": spec.pse.rw_steps, "n_eigvecs": spec.pse.n_eigvecs,
                "include_eigenvalues": spec.pse.include_eigenvalues},
        "task_heads": [{"name": h.name, "out_dim": h.out_dim, "level": h.level}
                       for h in spec.task_heads],
    }


def spec_from_dict(doc: dict) -> NetworkSpec:
    return NetworkSpec(
        arch_kind=doc["arch_kind"],
        width=int(doc["width"]),
        depth=int(doc["depth"]),
        n_heads=int(doc["n_heads"]),
        dropout_p=float(doc["dropout_p"]),
        width_multiplier=float(doc["width_multiplier"]),
        depth_multiplier=float(doc.get("depth_multiplier", 1.0)),
        d_max=int(doc["d_max"]),
        node_feat_dim=int(doc["node_feat_dim"]),
        edge_feat_dim=int(doc["edge_feat_dim"]),
        pse=PSEConfig(**doc["pse"]),
        task_heads=tuple(TaskHeadSpec(**h) for h in doc["task_heads"]),
    )


# ---------------------------------------------------------------------------
# Attention bias buckets
# ---------------------------------------------------------------------------


def spd_buckets(g: MolGraph, d_max: int = 5) -> np.ndarray:
    """Shortest-path-distance buckets: 0..d_max, plus d_max+1 for unreachable."""
    n = g.n_nodes
    adj = [[] for _ in range(n)]
    for u, v in g.edges:
        adj[u].append(v)
        adj[v].append(u)
    out = np.full((n, n), d_max + 1, dtype=np.int64)
    for s in range(n):
        dist = {s: 0}
        dq = deque([s])
        while dq:
            u = dq.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    dq.append(w)
        for w, dw in dist.items():
            out[s, w] = min(dw, d_max)
    return out


# ---------------------------------------------------------------------------
# Packed batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MolInputs:
    """Per-molecule model inputs, computed once per dataset."""

    node_x: np.ndarray  # (N, node_feat_dim + pse width)
    edge_x: np.ndarray  # (M, edge_feat_dim)
    edges: np.ndarray  # (M, 2) int
    buckets: np.ndarray  # (N, N) int


def precompute_inputs(mix: DatasetMix, pse_cfg: PSEConfig, d_max: int = 5) -> list:
    out = []
    for g in mix.molecules:
        f = featurize(g)
        node_x = np.concatenate([f.node, build_pse_features(g, pse_cfg)], axis=1)
        out.append(MolInputs(node_x=node_x, edge_x=f.edge.copy(),
                             edges=np.array(g.edges, dtype=np.int64).reshape(-1, 2),
                             buckets=spd_buckets(g, d_max)))
    return out


@dataclass(frozen=True)
class PackedBatch:
    node_x: np.ndarray  # (sum N_i, d)
    edge_x: np.ndarray  # (sum M_i, d_e)
    src: np.ndarray  # (2 sum M_i,) directed edge sources
    dst: np.ndarray  # (2 sum M_i,) directed edge destinations
    edge_of_directed: np.ndarray  # (2 sum M_i,) undirected edge row per directed edge
    node_graph: np.ndarray  # (sum N_i,) graph index per node
    node_slices: tuple  # per-graph (start, stop) into the node table
    buckets: tuple  # per-graph (N_i, N_i) int matrices
    mol_indices: np.ndarray  # dataset molecule index per graph

    @property
    def n_graphs(self) -> int:
        return len(self.node_slices)

    @property
    def n_nodes(self) -> int:
        return self.node_x.shape[0]


def pack_batch(inputs: list, indices) -> PackedBatch:
    """Pack the chosen molecules into one block-diagonal batch."""
    indices = np.asarray(indices, dtype=np.int64)
    node_blocks, edge_blocks, buckets = [], [], []
    src, dst, eod, node_graph, slices = [], [], [], [], []
    n_off = 0
    e_off = 0
    for gi, mi in enumerate(indices):
        mol = inputs[int(mi)]
        n = mol.node_x.shape[0]
        m = mol.edges.shape[0]
        node_blocks.append(mol.node_x)
        edge_blocks.append(mol.edge_x)
        buckets.append(mol.buckets)
        for j in range(m):
            u, v = int(mol.edges[j, 0]) + n_off, int(mol.edges[j, 1]) + n_off
            src.extend((u, v))
            dst.extend((v, u))
            eod.extend((e_off + j, e_off + j))
        node_graph.extend([gi] * n)
        slices.append((n_off, n_off + n))
        n_off += n
        e_off += m
    d_e = edge_blocks[0].shape[1] if edge_blocks else EDGE_FEATURE_DIM
    return PackedBatch(
        node_x=np.concatenate(node_blocks, axis=0),
        edge_x=(np.concatenate(edge_blocks, axis=0) if e_off
                else np.zeros((0, d_e))),
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        edge_of_directed=np.array(eod, dtype=np.int64),
        node_graph=np.array(node_graph, dtype=np.int64),
        node_slices=tuple(slices),
        buckets=tuple(buckets),
        mol_indices=indices,
    )


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass
class Model:
    spec: NetworkSpec
    params: dict  # path -> Param

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def core_param_count(self) -> int:
        return int(sum(p.value.size for path, p in self.params.items()
                       if path.startswith("core.") or path == "bias_table"))


def _mlp2_specs(prefix: str, d_in: int, d_hidden: int, d_out: int, role: str,
                residual_out: bool = False) -> list:
    return [
        ParamSpec(f"{prefix}.w1", (d_in, d_hidden), role, fan_in=d_in),
        ParamSpec(f"{prefix}.b1", (d_hidden,), "bias"),
        ParamSpec(f"{prefix}.w2", (d_hidden, d_out), role, fan_in=d_hidden,
                  residual_out=residual_out),
        ParamSpec(f"{prefix}.b2", (d_out,), "bias"),
    ]


def param_specs(spec: NetworkSpec) -> list:
    """The full named-parameter table for a network spec."""
    w = spec.width
    out = []
    out += _mlp2_specs("node_encoder", spec.node_in_dim, w, w, "input")
    out += _mlp2_specs("edge_encoder", spec.edge_feat_dim, w, w, "input")
    for i in range(spec.depth):
        p = f"core.{i}"
        if spec.arch_kind in ("mpnn", "gps"):
            out += _mlp2_specs(f"{p}.msg", 3 * w, w, 2 * w, "hidden", residual_out=True)
            out += [ParamSpec(f"{p}.ln_mpnn.gain", (w,), "bias"),
                    ParamSpec(f"{p}.ln_mpnn.bias", (w,), "bias")]
        if spec.arch_kind in ("transformer", "gps"):
            out += [ParamSpec(f"{p}.attn.wq", (w, w), "hidden", fan_in=w),
                    ParamSpec(f"{p}.attn.wk", (w, w), "hidden", fan_in=w),
                    ParamSpec(f"{p}.attn.wv", (w, w), "hidden", fan_in=w)]
            out += _mlp2_specs(f"{p}.mlp", w, w, w, "hidden", residual_out=True)
            out += [ParamSpec(f"{p}.ln.gain", (w,), "bias"),
                    ParamSpec(f"{p}.ln.bias", (w,), "bias")]
    # present for every arch kind so the param table is uniform; only the
    # attention paths read it
    out.append(ParamSpec("bias_table", (spec.n_heads, spec.n_buckets), "bias"))
    out += _mlp2_specs("graph_output_nn", w, w, w, "hidden")
    out += _mlp2_specs("node_output_nn", w, w, w, "hidden")
    for h in spec.task_heads:
        out += [ParamSpec(f"task_heads.{h.name}.layer1.w", (w, w), "hidden", fan_in=w),
                ParamSpec(f"task_heads.{h.name}.layer1.b", (w,), "bias"),
                ParamSpec(f"task_heads.{h.name}.layer2.w", (w, h.out_dim), "head_out",
                          fan_in=w),
                ParamSpec(f"task_heads.{h.name}.layer2.b", (h.out_dim,), "bias")]
    return out


def assemble_network(spec: NetworkSpec, seed: int) -> Model:
    """Initialize all parameters with width/depth scaling rules applied.

    Each parameter draws from its own seeded stream keyed by (seed, path), so
    shared structure across widths stays aligned and assembly order is free.
    """
    specs = param_specs(spec)
    scale = mup_scale(specs, spec.width_multiplier, spec.depth_multiplier)
    params = {}
    for ps in specs:
        std, lr_mult = scale[ps.path]
        if ps.role == "bias":
            if ps.path.endswith(".gain"):
                init = np.ones(ps.shape)
                if spec.depth_multiplier != 1.0 and (".ln_mpnn." in ps.path
                                                     or ".ln." in ps.path):
                    # residual-branch closing gains carry the depth factor
                    init /= np.sqrt(spec.depth_multiplier)
            elif ps.path == "bias_table":
                init = np.zeros(ps.shape)
                init[:, -1] = UNREACHABLE_BIAS  # unreachable bucket: no attention
            else:
                init = np.zeros(ps.shape)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, zlib.crc32(ps.path.encode("utf-8")))))
            init = rng.normal(0.0, std, size=ps.shape)
        params[ps.path] = Param(name=ps.path, value=init, lr_multiplier=lr_mult)
    return Model(spec=spec, params=params)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def _leaf_map(model: Model, with_grad: bool) -> dict:
    return {path: (Tensor.leaf(p.value) if with_grad else Tensor(p.value))
            for path, p in model.params.items()}


def _mlp2_at(leaves: dict, prefix: str, x: Tensor) -> Tensor:
    return mlp2(x, leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"],
                leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"])


def mpnn_block(x: Tensor, e: Tensor, batch: PackedBatch, leaves: dict, prefix: str,
               p_drop: float, mode: str, rng: RngStream | None):
    """One MPNN++ block on a packed batch; returns (nodes', edges')."""
    w = x.shape[1]
    msg_in = T.concat([T.gather_rows(x, batch.src), T.gather_rows(x, batch.dst),
                       T.gather_rows(e, batch.edge_of_directed)], axis=1)
    h = _mlp2_at(leaves, f"{prefix}.msg", msg_in)
    msgs = T.narrow(h, 1, 0, w)
    edge_upd = T.narrow(h, 1, w, w)

    agg = T.canonical_segment_sum(msgs, batch.dst, batch.n_nodes)
    x_bar = dropout(agg, p_drop, mode,
                    rng.generator(f"{prefix}.drop_agg") if rng else None)
    normed = layernorm(dropout(x_bar, p_drop, mode,
                               rng.generator(f"{prefix}.drop_node") if rng else None),
                       leaves[f"{prefix}.ln_mpnn.gain"], leaves[f"{prefix}.ln_mpnn.bias"])
    x_out = T.add(normed, x_bar)

    n_dir = batch.src.shape[0]
    fwd = T.gather_rows(edge_upd, np.arange(0, n_dir, 2))
    rev = T.gather_rows(edge_upd, np.arange(1, n_dir, 2))
    e_out = T.add(T.mul(T.add(fwd, rev), 0.5), e)  # two-term mean is order-exact
    return x_out, e_out


def biased_attention(x: Tensor, buckets: np.ndarray, pad_mask: np.ndarray | None,
                     wq: Tensor, wk: Tensor, wv: Tensor, bias_table: Tensor,
                     n_heads: int) -> Tensor:
    """Multi-head attention over one graph with additive SPD-bucket biases.

    Z is the attention-weighted value projection (heads re-concatenated); no
    output projection. ``pad_mask`` marks real positions; None means all real.
    """
    n, w = x.shape
    if w % n_heads:
        raise ValueError("width not divisible by n_heads")
    dh = w // n_heads
    if buckets.shape != (n, n):
        raise ValueError(f"bucket matrix shape {buckets.shape} != ({n}, {n})")
    if pad_mask is None:
        pad_mask = np.ones(n, dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any():
        raise ValueError("attention over fully padded input")

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n, n_heads, dh)), (1, 0, 2))

    q = split_heads(T.matmul(x, wq))
    k = split_heads(T.matmul(x, wk))
    v = split_heads(T.matmul(x, wv))
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    logits = T.add(logits, T.bucket_bias(bias_table, buckets))
    valid = np.broadcast_to(pad_mask[None, None, :], (n_heads, n, n))
    probs = T.masked_softmax_canonical(logits, valid)
    z = T.weighted_sum_canonical(probs, v)  # (heads, n, dh)
    return T.reshape(T.transpose(z, (1, 0, 2)), (n, w))


def _attention_over_batch(x: Tensor, batch: PackedBatch, leaves: dict, prefix: str,
                          n_heads: int) -> Tensor:
    parts = []
    for (start, stop), buckets in zip(batch.node_slices, batch.buckets):
        xg = T.narrow(x, 0, start, stop - start)
        parts.append(biased_attention(xg, buckets, None, leaves[f"{prefix}.attn.wq"],
                                      leaves[f"{prefix}.attn.wk"],
                                      leaves[f"{prefix}.attn.wv"],
                                      leaves["bias_table"], n_heads))
    return T.concat(parts, axis=0)


def _mlp_wrap(x_in: Tensor, leaves: dict, prefix: str, p_drop: float, mode: str,
              rng: RngStream | None) -> Tensor:
    """MLP with the same dropout/layernorm/residual wrapping as the MPNN node path."""
    m_bar = dropout(_mlp2_at(leaves, f"{prefix}.mlp", x_in), p_drop, mode,
                    rng.generator(f"{prefix}.drop_mlp") if rng else None)
    normed = layernorm(dropout(m_bar, p_drop, mode,
                               rng.generator(f"{prefix}.drop_node2") if rng else None),
                       leaves[f"{prefix}.ln.gain"], leaves[f"{prefix}.ln.bias"])
    return T.add(normed, m_bar)


def transformer_block(x: Tensor, e: Tensor, batch: PackedBatch, leaves: dict,
                      prefix: str, n_heads: int, p_drop: float, mode: str,
                      rng: RngStream | None):
    """Biased self-attention plus wrapped MLP; edge features pass through untouched."""
    z = _attention_over_batch(x, batch, leaves, prefix, n_heads)
    x_out = _mlp_wrap(T.add(x, z), leaves, prefix, p_drop, mode, rng)
    return x_out, e


def gps_block(x: Tensor, e: Tensor, batch: PackedBatch, leaves: dict, prefix: str,
              n_heads: int, p_drop: float, mode: str, rng: RngStream | None):
    """MPNN++ then biased attention on its node output, combined through the MLP wrap."""
    x_m, e_out = mpnn_block(x, e, batch, leaves, prefix, p_drop, mode, rng)
    z = _attention_over_batch(x_m, batch, leaves, prefix, n_heads)
    x_out = _mlp_wrap(T.add(x_m, z), leaves, prefix, p_drop, mode, rng)
    return x_out, e_out


# ---------------------------------------------------------------------------
# Whole-network forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    task_outputs: dict  # name -> Tensor ((B, out) graph level, (sum N, out) node level)
    taps: dict  # tap name -> Tensor
    leaves: dict  # param path -> leaf Tensor (grads land here)
    batch: PackedBatch


def forward(model: Model, batch: PackedBatch, mode: str = "eval",
            rng: RngStream | None = None, taps: tuple = (),
            with_grad: bool | None = None) -> ForwardResult:
    """Run the network on a packed batch.

    ``taps`` may name ``graph_output_nn``, ``task_heads.<name>.layer1`` (both
    graph-level), or ``core.<i>`` (node-level); tapped activations are
    returned alongside the per-task outputs.
    """
    spec = model.spec
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if mode == "train" and spec.dropout_p > 0 and rng is None:
        raise ValueError("train mode needs an RngStream")
    if with_grad is None:
        with_grad = mode == "train"
    leaves = _leaf_map(model, with_grad)
    known_taps = set(available_taps(spec))
    for t in taps:
        if t not in known_taps:
            raise ValueError(f"unknown tap {t!r}; available: {sorted(known_taps)}")

    tapped = {}
    x = _mlp2_at(leaves, "node_encoder", Tensor(batch.node_x))
    e = _mlp2_at(leaves, "edge_encoder", Tensor(batch.edge_x))

    for i in range(spec.depth):
        prefix = f"core.{i}"
        if spec.arch_kind == "mpnn":
            x, e = mpnn_block(x, e, batch, leaves, prefix, spec.dropout_p, mode, rng)
        elif spec.arch_kind == "transformer":
            x, e = transformer_block(x, e, batch, leaves, prefix, spec.n_heads,
                                     spec.dropout_p, mode, rng)
        else:
            x, e = gps_block(x, e, batch, leaves, prefix, spec.n_heads,
                             spec.dropout_p, mode, rng)
        if prefix in taps:
            tapped[prefix] = x

    pooled = T.canonical_segment_sum(x, batch.node_graph, batch.n_graphs)
    g_repr = _mlp2_at(leaves, "graph_output_nn", pooled)
    if "graph_output_nn" in taps:
        tapped["graph_output_nn"] = g_repr
    n_repr = _mlp2_at(leaves, "node_output_nn", x)

    outputs = {}
    for h in spec.task_heads:
        inp = g_repr if h.level == "graph" else n_repr
        hidden = T.relu(linear(inp, leaves[f"task_heads.{h.name}.layer1.w"],
                               leaves[f"task_heads.{h.name}.layer1.b"]))
        if f"task_heads.{h.name}.layer1" in taps:
            tapped[f"task_heads.{h.name}.layer1"] = hidden
        outputs[h.name] = linear(hidden, leaves[f"task_heads.{h.name}.layer2.w"],
                                 leaves[f"task_heads.{h.name}.layer2.b"])
    return ForwardResult(task_outputs=outputs, taps=tapped, leaves=leaves, batch=batch)


def available_taps(spec: NetworkSpec) -> list:
    names = ["graph_output_nn"]
    names += [f"task_heads.{h.name}.layer1" for h in spec.task_heads]
    names += [f"core.{i}" for i in range(spec.depth)]
    return names


def graph_level_taps(spec: NetworkSpec) -> list:
    return ["graph_output_nn"] + [f"task_heads.{h.name}.layer1" for h in spec.task_heads
                                  if h.level == "graph"]
