"""Multi-task masked pretraining: loss, training loop, evaluation, checkpoints.

Labels are sparse; every task contributes a mean loss over its unmasked
entries only, and tasks with nothing unmasked in a batch drop out of that
batch's total. Two runs with identical config and data produce bitwise
identical histories and checkpoints.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from . import tensor as T
from .arch import (Model, NetworkSpec, PackedBatch, assemble_network, forward,
                   pack_batch, param_specs, precompute_inputs, spec_from_dict,
                   spec_to_dict, TaskHeadSpec)
from .checkpoint import load_params, save_params
from .layers import RngStream
from .molgraph import DatasetMix, TaskTable
from .optim import AdamState, LrSchedule, Param, adam_step, lr_at, mup_scale

ARCH_BASE_LR = {"mpnn": 3e-3, "transformer": 1e-3, "gps": 1e-3}


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 256  # paper-scale 1024 available via flag
    seed: int = 0
    base_lr: float | None = None  # None -> per-arch default
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs <= self.warmup_epochs:
            raise ValueError(
                f"epochs ({self.epochs}) must exceed warmup_epochs ({self.warmup_epochs})")

    def resolved_lr(self, arch_kind: str) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return ARCH_BASE_LR[arch_kind]


def heads_for_mix(mix: DatasetMix) -> tuple:
    return tuple(TaskHeadSpec(t.name, t.n_columns, t.level) for t in mix.tasks)


def _check_heads(spec: NetworkSpec, mix: DatasetMix) -> list:
    """Tasks the model can train on, in mix order; errors if none match."""
    by_name = {t.name: t for t in mix.tasks}
    usable = []
    for h in spec.task_heads:
        t = by_name.get(h.name)
        if t is None:
            continue
        if t.level != h.level or t.n_columns != h.out_dim:
            raise TrainError(
                f"task head {h.name!r} ({h.level}, {h.out_dim} cols) does not match "
                f"dataset task ({t.level}, {t.n_columns} cols)")
        usable.append(t)
    if not usable:
        raise TrainError("no dataset task matches any model head")
    return usable


def batch_labels(task: TaskTable, batch: PackedBatch):
    """Label/mask arrays aligned with the model output for this batch."""
    idx = batch.mol_indices
    if task.level == "graph":
        return task.values[idx], task.mask[idx]
    values = np.concatenate([task.values[int(i)] for i in idx], axis=0)
    mask = np.concatenate([task.mask[int(i)] for i in idx], axis=0)
    return values, mask


def masked_task_loss(output, values: np.ndarray, mask: np.ndarray, kind: str):
    """Mean loss over unmasked entries, or None if everything is masked.

    Classification: binary cross-entropy on logits. Regression: absolute error.
    """
    if not mask.any():
        return None
    pred = T.select_mask(output, mask)
    target = values[mask]
    if kind == "classification":
        # softplus(x) - x*y == -log sigmoid(x) for y=1, -log(1-sigmoid(x)) for y=0
        return T.mean_all(T.add(T.softplus(pred), T.mul(pred, -target)))
    return T.mean_all(T.absolute(T.add(pred, -target)))


def masked_multitask_loss(outputs: dict, tasks, batch: PackedBatch):
    """(total loss tensor, {task: float}) over unmasked entries.

    Total is the unweighted mean over tasks with at least one unmasked entry
    in the batch; fully masked tasks are skipped.
    """
    per_task = {}
    terms = []
    for task in tasks:
        y, m = batch_labels(task, batch)
        loss = masked_task_loss(outputs[task.name], y, m, task.kind)
        if loss is None:
            continue
        per_task[task.name] = float(loss.data)
        terms.append(loss)
    if not terms:
        return None, per_task
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms)), per_task


@dataclass
class History:
    """Per-epoch training trace; every list has one entry per epoch."""

    epochs: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    metrics: list = field(default_factory=list)  # dict: "<split>_<task>_<metric>" -> float|None

    def metric_columns(self) -> list:
        cols = set()
        for row in self.metrics:
            cols.update(row)
        return sorted(cols)


def history_to_csv(history: History, path) -> None:
    cols = history.metric_columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss"] + cols)
        for i, epoch in enumerate(history.epochs):
            row = [epoch, repr(history.lr[i]), repr(history.train_loss[i])]
            row += [analysis.UNDEFINED_CELL if history.metrics[i].get(c) is None
                    else repr(history.metrics[i][c]) for c in cols]
            w.writerow(row)


def _macro(values) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def metrics_for_task(task: TaskTable, pred: np.ndarray, values: np.ndarray,
                     mask: np.ndarray) -> dict:
    """Column-macro metrics over unmasked entries; None when undefined."""
    out = {}
    cols = range(values.shape[1])
    if task.kind == "classification":
        aurocs, auprcs = [], []
        for c in cols:
            m = mask[:, c]
            if not m.any():
                continue
            aurocs.append(analysis.auroc(pred[m, c], values[m, c]))
            auprcs.append(analysis.auprc(pred[m, c], values[m, c]))
        out["auroc"] = _macro(aurocs)
        out["auprc"] = _macro(auprcs)
        return out
    maes, pearsons, spearmans = [], [], []
    for c in cols:
        m = mask[:, c]
        if not m.any():
            continue
        maes.append(analysis.mae(pred[m, c], values[m, c]))
        if task.level == "graph" and int(m.sum()) >= 2:
            pearsons.append(analysis.pearson(pred[m, c], values[m, c]))
            spearmans.append(analysis.spearman(pred[m, c], values[m, c]))
    out["mae"] = _macro(maes)
    if task.level == "graph":
        out["pearson"] = _macro(pearsons)
        out["spearman"] = _macro(spearmans)
    return out


def predict(model: Model, inputs: list, indices, tasks, batch_size: int = 256):
    """Eval-mode predictions for each task, and the per-task label slices."""
    indices = np.asarray(indices, dtype=np.int64)
    preds = {t.name: [] for t in tasks}
    labels = {t.name: ([], []) for t in tasks}
    for start in range(0, indices.shape[0], batch_size):
        chunk = indices[start:start + batch_size]
        batch = pack_batch(inputs, chunk)
        result = forward(model, batch, mode="eval", with_grad=False)
        for t in tasks:
            preds[t.name].append(result.task_outputs[t.name].data)
            y, m = batch_labels(t, batch)
            labels[t.name][0].append(y)
            labels[t.name][1].append(m)
    out = {}
    for t in tasks:
        out[t.name] = (np.concatenate(preds[t.name], axis=0),
                       np.concatenate(labels[t.name][0], axis=0),
                       np.concatenate(labels[t.name][1], axis=0))
    return out


def evaluate(model: Model, mix: DatasetMix, split: str, inputs: list | None = None,
             batch_size: int = 256) -> dict:
    """Per-task metric map on one split (macro over task columns)."""
    if split not in mix.splits:
        raise TrainError(f"unknown split {split!r}")
    indices = mix.splits[split]
    if len(indices) == 0:
        raise TrainError(f"split {split!r} is empty")
    tasks = _check_heads(model.spec, mix)
    if inputs is None:
        inputs = precompute_inputs(mix, model.spec.pse, model.spec.d_max)
    table = predict(model, inputs, indices, tasks, batch_size)
    return {t.name: metrics_for_task(t, *table[t.name]) for t in tasks}


def pretrain(spec: NetworkSpec, mix: DatasetMix, cfg: TrainConfig,
             inputs: list | None = None):
    """Train from scratch on the mix's train split; returns (model, history)."""
    tasks = _check_heads(spec, mix)
    train_idx = np.asarray(mix.splits["train"], dtype=np.int64)
    if train_idx.size == 0:
        raise TrainError("train split is empty")
    if inputs is None:
        inputs = precompute_inputs(mix, spec.pse, spec.d_max)

    model = assemble_network(spec, cfg.seed)
    schedule = LrSchedule(base_lr=cfg.resolved_lr(spec.arch_kind),
                          warmup_epochs=cfg.warmup_epochs, total_epochs=cfg.epochs)
    states = {path: AdamState.for_param(p) for path, p in model.params.items()}
    history = History()
    eval_splits = [s for s in ("val", "test") if len(mix.splits[s])]

    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        shuffle = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = shuffle.permutation(train_idx)
        batch_losses = []
        for b, start in enumerate(range(0, order.shape[0], cfg.batch_size)):
            batch = pack_batch(inputs, order[start:start + cfg.batch_size])
            rng = RngStream(cfg.seed, epoch, b)
            result = forward(model, batch, mode="train", rng=rng)
            loss, _ = masked_multitask_loss(result.task_outputs, tasks, batch)
            if loss is None:
                continue  # every task fully masked in this batch
            total = float(loss.data)
            if not np.isfinite(total):
                raise TrainError(f"non-finite loss at epoch {epoch} batch {b}")
            loss.backward()
            for path, leaf in result.leaves.items():
                p = model.params[path]
                p.grad = leaf.grad if leaf.grad is not None else np.zeros_like(p.value)
            adam_step(model.params, states, lr=lr)
            batch_losses.append(total)
        if not batch_losses:
            raise TrainError(f"no trainable batch in epoch {epoch}")

        row = {}
        for split in eval_splits:
            for tname, metric_map in evaluate(model, mix, split, inputs,
                                              cfg.batch_size).items():
                for metric, value in metric_map.items():
                    row[f"{split}_{tname}_{metric}"] = value
        history.epochs.append(epoch)
        history.lr.append(lr)
        history.train_loss.append(float(np.mean(batch_losses)))
        history.metrics.append(row)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _sidecar(path) -> str:
    return str(path) + ".spec.json"


def save_checkpoint(model: Model, path) -> None:
    save_params(path, {name: p.value for name, p in model.params.items()})
    with open(_sidecar(path), "w") as fh:
        json.dump(spec_to_dict(model.spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Model:
    """Load and validate a checkpoint against its recorded network spec."""
    if not os.path.exists(_sidecar(path)):
        raise TrainError(f"missing spec sidecar {_sidecar(path)!r}")
    with open(_sidecar(path)) as fh:
        spec = spec_from_dict(json.load(fh))
    arrays = load_params(path)
    specs = param_specs(spec)
    expected = {ps.path: ps.shape for ps in specs}
    for name in expected:
        if name not in arrays:
            raise TrainError(f"checkpoint missing param {name!r}")
    for name in arrays:
        if name not in expected:
            raise TrainError(f"checkpoint has unexpected param {name!r}")
        if arrays[name].shape != expected[name]:
            raise TrainError(
                f"param {name!r} has shape {arrays[name].shape}, expected {expected[name]}")
    scale = mup_scale(specs, spec.width_multiplier, spec.depth_multiplier)
    params = {name: Param(name=name, value=arrays[name], lr_multiplier=scale[name][1])
              for name in expected}
    return Model(spec=spec, params=params)
