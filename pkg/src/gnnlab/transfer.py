"""Reusing a pretrained network: fingerprints, probing heads, finetuning.

A fingerprint is a graph-level activation captured at a named tap, cached on
disk so downstream experiments never re-run the base network. Probing trains
a small MLP on frozen fingerprints; finetuning trims the network after the
tap, appends a fresh head, and unfreezes the base only after a warm start.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from . import tensor as T
from .arch import (Model, NetworkSpec, TaskHeadSpec, forward, gps_block,
                   graph_level_taps, mpnn_block, pack_batch, precompute_inputs,
                   transformer_block)
from .layers import linear, mlp2
from .molgraph import DatasetMix, TaskTable, molecule_id
from .optim import AdamState, Param, adam_step
from .tensor import Tensor
from .train import masked_task_loss, metrics_for_task

CACHE_MAGIC = b"MFPC"
CACHE_VERSION = 1
# guard against absurd dims from a corrupt header before allocating
MAX_CACHE_DIM = 1 << 24


class TransferError(RuntimeError):
    pass


@dataclass(frozen=True)
class FingerprintSet:
    """Per-molecule vectors captured at one tap of one model."""

    source_model_id: str
    tap: str
    dim: int
    vectors: dict  # molecule id -> (dim,) float64

    def __post_init__(self):
        for mid, v in self.vectors.items():
            if v.shape != (self.dim,):
                raise TransferError(
                    f"fingerprint for {mid!r} has shape {v.shape}, want ({self.dim},)")


def extract_fingerprints(model: Model, mix: DatasetMix, taps,
                         model_id: str | None = None, batch_size: int = 256,
                         inputs: list | None = None) -> list:
    """Eval-mode activations at each tap for every molecule in the mix.

    Only graph-level taps can be probed; asking for a node-level tap is an
    error rather than a silently pooled vector.
    """
    spec = model.spec
    allowed = graph_level_taps(spec)
    for tap in taps:
        if tap not in allowed:
            raise TransferError(
                f"tap {tap!r} is not a graph-level tap; probing supports {allowed}")
    if model_id is None:
        model_id = f"{spec.arch_kind}-w{spec.width}-d{spec.depth}"
    if inputs is None:
        inputs = precompute_inputs(mix, spec.pse, spec.d_max)
    n = len(mix.molecules)
    blocks = {tap: [] for tap in taps}
    for start in range(0, n, batch_size):
        batch = pack_batch(inputs, np.arange(start, min(start + batch_size, n)))
        result = forward(model, batch, mode="eval", with_grad=False, taps=tuple(taps))
        for tap in taps:
            blocks[tap].append(result.taps[tap].data)
    sets = []
    for tap in taps:
        mat = np.concatenate(blocks[tap], axis=0)
        vectors = {molecule_id(i): mat[i].copy() for i in range(n)}
        sets.append(FingerprintSet(model_id, tap, mat.shape[1], vectors))
    return sets


# ---------------------------------------------------------------------------
# Disk cache
# ---------------------------------------------------------------------------


def write_cache(fset: FingerprintSet, path) -> None:
    """Records sorted by molecule id; all integers little-endian."""
    out = bytearray()
    out += CACHE_MAGIC
    out += struct.pack("<I", CACHE_VERSION)
    out += struct.pack("<I", fset.dim)
    out += struct.pack("<Q", len(fset.vectors))
    for mid in sorted(fset.vectors):
        raw = mid.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        out += np.ascontiguousarray(fset.vectors[mid], dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_cache(path, source_model_id: str = "", tap: str = "") -> FingerprintSet:
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:4] != CACHE_MAGIC:
        raise TransferError(f"{path}: not a fingerprint cache (bad magic)")
    version, dim = struct.unpack_from("<II", buf, 4)
    if version != CACHE_VERSION:
        raise TransferError(f"{path}: unsupported cache version {version}")
    if dim == 0 or dim > MAX_CACHE_DIM:
        raise TransferError(f"{path}: fingerprint dim {dim} out of range")
    (count,) = struct.unpack_from("<Q", buf, 12)
    offset = 20
    vectors = {}
    for _ in range(count):
        if offset + 4 > len(buf):
            raise TransferError(f"{path}: truncated cache while reading id length")
        (id_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + id_len + 8 * dim > len(buf):
            raise TransferError(f"{path}: truncated cache (count field inconsistent "
                                "with file length)")
        mid = buf[offset:offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
        if mid in vectors:
            raise TransferError(f"{path}: duplicate molecule id {mid!r}")
        vectors[mid] = vec
    if offset != len(buf):
        raise TransferError(f"{path}: {len(buf) - offset} trailing bytes after "
                            f"{count} records")
    return FingerprintSet(source_model_id, tap, dim, vectors)


def _cache_file_name(fset: FingerprintSet) -> str:
    return f"{fset.source_model_id}__{fset.tap.replace('.', '_')}.mfpc"


def save_fingerprints(sets, out_dir) -> list:
    """Write one cache file per set plus a ``fingerprints.json`` manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for fset in sets:
        name = _cache_file_name(fset)
        write_cache(fset, out_dir / name)
        manifest.append({"source_model_id": fset.source_model_id, "tap": fset.tap,
                         "dim": fset.dim, "count": len(fset.vectors), "file": name})
    with open(out_dir / "fingerprints.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_fingerprints(in_dir) -> list:
    in_dir = Path(in_dir)
    with open(in_dir / "fingerprints.json") as fh:
        manifest = json.load(fh)
    sets = []
    for entry in manifest:
        fset = read_cache(in_dir / entry["file"], entry["source_model_id"], entry["tap"])
        if fset.dim != entry["dim"] or len(fset.vectors) != entry["count"]:
            raise TransferError(f"{entry['file']}: manifest disagrees with cache header")
        sets.append(fset)
    return sets


def concat_fingerprints(sets) -> FingerprintSet:
    """Per-molecule concatenation in argument order; dims add."""
    if len(sets) < 2:
        raise TransferError("need at least two fingerprint sets to concatenate")
    all_ids = set()
    for s in sets:
        all_ids.update(s.vectors)
    for mid in sorted(all_ids):
        for s in sets:
            if mid not in s.vectors:
                raise TransferError(f"molecule {mid!r} missing from fingerprint set "
                                    f"{s.source_model_id}/{s.tap}")
    vectors = {mid: np.concatenate([s.vectors[mid] for s in sets])
               for mid in sets[0].vectors}
    return FingerprintSet("+".join(s.source_model_id for s in sets),
                          "+".join(s.tap for s in sets),
                          sum(s.dim for s in sets), vectors)


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    seed: int = 0
    hidden_dim: int = 128
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-4

    def __post_init__(self):
        if min(self.hidden_dim, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("probe hyperparameters must be positive")


def _fresh_head(d_in: int, hidden: int, d_out: int, seed: int, prefix: str) -> dict:
    """Two-layer MLP head: random first layer, zero output layer.

    Zero output weights start the head at exactly zero, so its first updates
    move straight along the loss gradient instead of unlearning a random
    projection; with the small constant lr this is the difference between
    converging and stalling.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, zlib.crc32(prefix.encode("utf-8")))))
    names = {f"{prefix}.w1": rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden)),
             f"{prefix}.b1": np.zeros(hidden),
             f"{prefix}.w2": np.zeros((hidden, d_out)),
             f"{prefix}.b2": np.zeros(d_out)}
    return {path: Param(name=path, value=value) for path, value in names.items()}


def _head_forward(params: dict, x: np.ndarray, prefix: str, with_grad: bool):
    leaves = {path: (Tensor.leaf(p.value) if with_grad else Tensor(p.value))
              for path, p in params.items()}
    out = mlp2(Tensor(x), leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"],
               leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"])
    return out, leaves


def selection_metric(kind: str, pred: np.ndarray, values: np.ndarray,
                     mask: np.ndarray) -> float | None:
    """Scalar used to rank epochs: macro AUROC or macro Pearson, None if
    undefined in every column."""
    per_col = []
    for c in range(values.shape[1]):
        m = mask[:, c]
        if not m.any():
            continue
        if kind == "classification":
            per_col.append(analysis.auroc(pred[m, c], values[m, c]))
        elif int(m.sum()) >= 2:
            per_col.append(analysis.pearson(pred[m, c], values[m, c]))
    defined = [v for v in per_col if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def _best_epoch(val_trace) -> int:
    """1-based argmax with None treated as unusable; ties go to the earlier epoch."""
    best, best_val = None, -np.inf
    for i, v in enumerate(val_trace):
        if v is not None and v > best_val:
            best, best_val = i, v
    if best is None:
        raise TransferError("validation metric undefined at every epoch")
    return best + 1


def _design_matrix(fps: FingerprintSet, n_molecules: int) -> np.ndarray:
    rows = []
    for i in range(n_molecules):
        mid = molecule_id(i)
        if mid not in fps.vectors:
            raise TransferError(f"molecule {mid!r} has no fingerprint")
        rows.append(fps.vectors[mid])
    return np.stack(rows)


@dataclass
class ProbeResult:
    head: dict  # parameters at the best epoch
    best_epoch: int  # 1-based
    metric_name: str
    val_trace: list
    test_trace: list
    val_metric: float
    test_metric: float | None
    test_metrics: dict  # full metric map at the best epoch


def _run_probe(fps: FingerprintSet, task: TaskTable, splits: dict,
               cfg: ProbeConfig, seed: int):
    """One seeded probe run; returns (val_trace, test_trace, per-epoch heads)."""
    if task.level != "graph":
        raise TransferError("probing expects a graph-level task")
    n = task.values.shape[0]
    x = _design_matrix(fps, n)
    train_idx = np.asarray(splits["train"], dtype=np.int64)
    if train_idx.size == 0:
        raise TransferError("train split is empty")
    prefix = "probe"
    params = _fresh_head(fps.dim, cfg.hidden_dim, task.n_columns, seed, prefix)
    states = {path: AdamState.for_param(p) for path, p in params.items()}
    val_trace, test_trace, snapshots = [], [], []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((seed, epoch))).permutation(train_idx)
        for start in range(0, order.shape[0], cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            out, leaves = _head_forward(params, x[rows], prefix, with_grad=True)
            loss = masked_task_loss(out, task.values[rows], task.mask[rows], task.kind)
            if loss is None:
                continue
            if not np.isfinite(loss.data):
                raise TransferError(f"non-finite probe loss at epoch {epoch} "
                                    f"batch {start // cfg.batch_size}")
            loss.backward()
            for path, leaf in leaves.items():
                params[path].grad = (leaf.grad if leaf.grad is not None
                                     else np.zeros_like(params[path].value))
            adam_step(params, states, lr=cfg.lr)
        for split, trace in (("val", val_trace), ("test", test_trace)):
            idx = np.asarray(splits[split], dtype=np.int64)
            pred, _ = _head_forward(params, x[idx], prefix, with_grad=False)
            trace.append(selection_metric(task.kind, pred.data, task.values[idx],
                                          task.mask[idx]))
        snapshots.append({path: p.value.copy() for path, p in params.items()})
    return val_trace, test_trace, snapshots


def probe(fps: FingerprintSet, task: TaskTable, splits: dict,
          cfg: ProbeConfig) -> ProbeResult:
    """Train an MLP head on frozen fingerprints; select the epoch on validation.

    The fingerprints are never modified; the reported test metric is read at
    the validation-optimal epoch, never tuned on test.
    """
    val_trace, test_trace, snapshots = _run_probe(fps, task, splits, cfg, cfg.seed)
    best = _best_epoch(val_trace)
    head = {path: Param(name=path, value=value)
            for path, value in snapshots[best - 1].items()}
    test_idx = np.asarray(splits["test"], dtype=np.int64)
    x = _design_matrix(fps, task.values.shape[0])
    pred, _ = _head_forward(head, x[test_idx], "probe", with_grad=False)
    test_metrics = metrics_for_task(task, pred.data, task.values[test_idx],
                                    task.mask[test_idx])
    metric_name = "auroc" if task.kind == "classification" else "pearson"
    return ProbeResult(head=head, best_epoch=best, metric_name=metric_name,
                       val_trace=val_trace, test_trace=test_trace,
                       val_metric=val_trace[best - 1], test_metric=test_trace[best - 1],
                       test_metrics=test_metrics)


@dataclass
class EnsembleProbeResult:
    best_epoch: int  # 1-based, shared across seeds
    metric_name: str
    seed_tests: dict  # seed -> test metric at the shared epoch
    mean_test: float | None
    mean_val_trace: list


def probe_ensemble(fps: FingerprintSet, task: TaskTable, splits: dict,
                   cfg: ProbeConfig, seeds) -> EnsembleProbeResult:
    """Seed-averaged epoch selection: one epoch for all seeds.

    The per-epoch validation metric is averaged across seeds, the argmax epoch
    is chosen once, and every seed reports its test metric at that epoch.
    """
    seeds = list(seeds)
    if not seeds:
        raise TransferError("need at least one seed")
    val_traces, test_traces = {}, {}
    for seed in seeds:
        v, t, _ = _run_probe(fps, task, splits, cfg, seed)
        val_traces[seed], test_traces[seed] = v, t
    mean_val = []
    for epoch in range(cfg.epochs):
        vals = [val_traces[s][epoch] for s in seeds]
        mean_val.append(None if any(v is None for v in vals) else float(np.mean(vals)))
    best = _best_epoch(mean_val)
    seed_tests = {s: test_traces[s][best - 1] for s in seeds}
    defined = [v for v in seed_tests.values() if v is not None]
    metric_name = "auroc" if task.kind == "classification" else "pearson"
    return EnsembleProbeResult(best_epoch=best, metric_name=metric_name,
                               seed_tests=seed_tests,
                               mean_test=float(np.mean(defined)) if defined else None,
                               mean_val_trace=mean_val)


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    finetune_module: str
    seed: int = 0
    hidden_dim: int = 256
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-4
    freeze_epochs: int = 10

    def __post_init__(self):
        if min(self.hidden_dim, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("finetune hyperparameters must be positive")
        if not (0 <= self.freeze_epochs < self.epochs):
            raise ValueError("need 0 <= freeze_epochs < epochs")


@dataclass
class FinetunedModel:
    """Trimmed base network plus a fresh downstream head.

    The base keeps everything up to (and including) the finetune module;
    node-level outputs and other task heads are dropped. Dropout is zero.
    """

    spec: NetworkSpec
    params: dict  # path -> Param; base paths plus head.*
    finetune_module: str
    base_paths: tuple
    head_paths: tuple
    task_name: str


def _trimmed_base_paths(model: Model, module: str) -> list:
    """Base params that survive trimming at ``module``.

    Node-level outputs and task heads are dropped, except the tapped head's
    first layer when the finetune module is a head tap.
    """
    kept_head = (f"{module}.w", f"{module}.b") if module.startswith("task_heads.") else ()
    paths = []
    for path in sorted(model.params):
        if path.startswith("node_output_nn."):
            continue
        if path.startswith("task_heads.") and path not in kept_head:
            continue
        paths.append(path)
    return paths


def finetune_forward(fmodel: FinetunedModel, batch, with_grad_base: bool = False,
                     with_grad_head: bool = False):
    """Trimmed forward: encoders, core, tap module, fresh head."""
    spec = fmodel.spec
    leaves = {}
    for path, p in fmodel.params.items():
        trainable = with_grad_head if path.startswith("head.") else with_grad_base
        leaves[path] = Tensor.leaf(p.value) if trainable else Tensor(p.value)

    def run_mlp2(prefix, x):
        return mlp2(x, leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"],
                    leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"])

    x = run_mlp2("node_encoder", Tensor(batch.node_x))
    e = run_mlp2("edge_encoder", Tensor(batch.edge_x))
    for i in range(spec.depth):
        prefix = f"core.{i}"
        if spec.arch_kind == "mpnn":
            x, e = mpnn_block(x, e, batch, leaves, prefix, 0.0, "eval", None)
        elif spec.arch_kind == "transformer":
            x, e = transformer_block(x, e, batch, leaves, prefix, spec.n_heads,
                                     0.0, "eval", None)
        else:
            x, e = gps_block(x, e, batch, leaves, prefix, spec.n_heads,
                             0.0, "eval", None)
    pooled = T.canonical_segment_sum(x, batch.node_graph, batch.n_graphs)
    g = run_mlp2("graph_output_nn", pooled)
    if fmodel.finetune_module.startswith("task_heads."):
        g = T.relu(linear(g, leaves[f"{fmodel.finetune_module}.w"],
                          leaves[f"{fmodel.finetune_module}.b"]))
    out = run_mlp2("head", g)
    return out, leaves


@dataclass
class FinetuneResult:
    best_epoch: int  # 1-based
    metric_name: str
    val_trace: list
    test_trace: list
    test_metric: float | None
    test_metrics: dict
    base_checksums: list  # per-epoch digest of base params (freeze witness)


def base_checksum(fmodel: FinetunedModel) -> str:
    h = hashlib.sha256()
    for path in fmodel.base_paths:
        h.update(np.ascontiguousarray(fmodel.params[path].value, dtype="<f8").tobytes())
    return h.hexdigest()


def finetune(model: Model, mix: DatasetMix, cfg: FinetuneConfig,
             inputs: list | None = None):
    """Two-phase finetuning: frozen base while the new head warms up, then all.

    Returns (FinetunedModel at the validation-optimal epoch, FinetuneResult).
    """
    allowed = graph_level_taps(model.spec)
    if cfg.finetune_module not in allowed:
        raise TransferError(f"finetune module {cfg.finetune_module!r} is not one of "
                            f"{allowed}")
    graph_tasks = [t for t in mix.tasks if t.level == "graph"]
    if len(mix.tasks) != 1 or not graph_tasks:
        raise TransferError("finetuning expects exactly one graph-level downstream task")
    task = graph_tasks[0]

    base_paths = _trimmed_base_paths(model, cfg.finetune_module)
    params = {path: Param(name=path, value=model.params[path].value.copy(),
                          lr_multiplier=model.params[path].lr_multiplier)
              for path in base_paths}
    head = _fresh_head(model.spec.width, cfg.hidden_dim, task.n_columns,
                       cfg.seed, "head")
    params.update(head)
    fspec = dataclasses.replace(
        model.spec, dropout_p=0.0,
        task_heads=(TaskHeadSpec(task.name, task.n_columns, "graph"),))
    fmodel = FinetunedModel(spec=fspec, params=params,
                            finetune_module=cfg.finetune_module,
                            base_paths=tuple(base_paths),
                            head_paths=tuple(sorted(head)), task_name=task.name)

    if inputs is None:
        inputs = precompute_inputs(mix, fspec.pse, fspec.d_max)
    train_idx = np.asarray(mix.splits["train"], dtype=np.int64)
    if train_idx.size == 0:
        raise TransferError("train split is empty")

    states = {}
    val_trace, test_trace, snapshots, checksums = [], [], [], []
    for epoch in range(cfg.epochs):
        frozen = epoch < cfg.freeze_epochs
        train_paths = fmodel.head_paths if frozen else tuple(sorted(params))
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, epoch))).permutation(train_idx)
        for b, start in enumerate(range(0, order.shape[0], cfg.batch_size)):
            batch = pack_batch(inputs, order[start:start + cfg.batch_size])
            out, leaves = finetune_forward(fmodel, batch,
                                           with_grad_base=not frozen,
                                           with_grad_head=True)
            loss = masked_task_loss(out, *batch_task_rows(task, batch), task.kind)
            if loss is None:
                continue
            if not np.isfinite(loss.data):
                raise TransferError(f"non-finite finetune loss at epoch {epoch} "
                                    f"batch {b}")
            loss.backward()
            stepped = {}
            for path in train_paths:
                leaf = leaves[path]
                params[path].grad = (leaf.grad if leaf.grad is not None
                                     else np.zeros_like(params[path].value))
                stepped[path] = params[path]
                if path not in states:
                    states[path] = AdamState.for_param(params[path])
            adam_step(stepped, {p: states[p] for p in stepped}, lr=cfg.lr)
        for split, trace in (("val", val_trace), ("test", test_trace)):
            idx = np.asarray(mix.splits[split], dtype=np.int64)
            batch = pack_batch(inputs, idx)
            pred, _ = finetune_forward(fmodel, batch)
            y, m = batch_task_rows(task, batch)
            trace.append(selection_metric(task.kind, pred.data, y, m))
        snapshots.append({path: p.value.copy() for path, p in params.items()})
        checksums.append(base_checksum(fmodel))

    best = _best_epoch(val_trace)
    for path, value in snapshots[best - 1].items():
        params[path].value = value
    test_idx = np.asarray(mix.splits["test"], dtype=np.int64)
    batch = pack_batch(inputs, test_idx)
    pred, _ = finetune_forward(fmodel, batch)
    y, m = batch_task_rows(task, batch)
    metric_name = "auroc" if task.kind == "classification" else "pearson"
    result = FinetuneResult(best_epoch=best, metric_name=metric_name,
                            val_trace=val_trace, test_trace=test_trace,
                            test_metric=test_trace[best - 1],
                            test_metrics=metrics_for_task(task, pred.data, y, m),
                            base_checksums=checksums)
    return fmodel, result


def batch_task_rows(task: TaskTable, batch):
    """Graph-level label rows for a packed batch."""
    idx = batch.mol_indices
    return task.values[idx], task.mask[idx]
