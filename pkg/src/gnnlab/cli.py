"""Command-line surface for reproducible experiments.

Subcommands: datagen, sweep, pretrain, fingerprint, probe, finetune, analyze.
Every command is deterministic given its inputs and seed: re-running overwrites
outputs with byte-identical files. Exit codes: 0 success, 1 usage/validation,
2 runtime failure; on failure the final stderr line is machine-readable JSON.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import transfer
from .arch import NetworkSpec, assemble_network, graph_level_taps
from .molgraph import (DatasetError, DatasetMix, GeneratorConfig, TaskTable,
                       ablate_dataset, generate_synthetic_mix, load_mix,
                       molecule_id, save_mix, subsample)
from .train import (TrainConfig, TrainError, heads_for_mix, history_to_csv,
                    load_checkpoint, pretrain, save_checkpoint)

METRIC_POLARITY = {"auroc": "higher", "auprc": "higher", "pearson": "higher",
                   "spearman": "higher", "mae": "lower"}

# manifest axes that define a scaling variable, and the variable they map to
SCALE_AXES = {"widths": "width", "depths": "depth",
              "molecule_fractions": "molecules", "label_fractions": "labels"}


class UsageError(Exception):
    """Bad arguments, config, or input files; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config files: one `key = value` per line, `#` comments
# ---------------------------------------------------------------------------


def parse_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    out = {}
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {ln}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def check_keys(config: dict, valid, where: str) -> None:
    unknown = sorted(set(config) - set(valid))
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {unknown}; valid keys: "
                         f"{sorted(valid)}")


def _to_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"key {key!r}: expected integer, got {raw!r}") from None


def _to_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"key {key!r}: expected number, got {raw!r}") from None


def _to_list(raw: str):
    return [part.strip() for part in raw.split(",") if part.strip()]


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("GNN_LAB_OUT", "runs")
    return Path(root) / default_name


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

DATAGEN_KEYS = ("seed", "n_molecules", "min_nodes", "max_nodes", "extra_edge_prob",
                "pcba_mask_rate", "n_l1000_columns", "n_pcba_columns")


def cmd_datagen(args) -> int:
    config = parse_config(args.config)
    check_keys(config, DATAGEN_KEYS, str(args.config))
    if args.seed is not None:
        seed = args.seed
    elif "seed" in config:
        seed = _to_int(config["seed"], "seed")
    else:
        raise UsageError("missing 'seed' (config key or --seed)")
    kwargs = {"n_molecules": _to_int(config.get("n_molecules", "1000"), "n_molecules"),
              "seed": seed}
    for key in ("min_nodes", "max_nodes", "n_l1000_columns", "n_pcba_columns"):
        if key in config:
            kwargs[key] = _to_int(config[key], key)
    for key in ("extra_edge_prob", "pcba_mask_rate"):
        if key in config:
            kwargs[key] = _to_float(config[key], key)
    try:
        cfg = GeneratorConfig(**kwargs)
    except DatasetError as err:
        raise UsageError(str(err)) from None
    out = _out_dir(args, "dataset")
    mix = generate_synthetic_mix(cfg)
    save_mix(mix, out)
    print(f"wrote {len(mix.molecules)} molecules, {len(mix.tasks)} tasks to {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("dataset", "arch_kinds", "widths", "depths", "seeds", "epochs",
                 "molecule_fractions", "label_fractions", "dataset_ablations",
                 "batch_size", "base_lr", "warmup_epochs", "n_heads",
                 "base_width", "base_depth", "record_params")


def load_manifest(path, seed_flag) -> dict:
    config = parse_config(path)
    check_keys(config, MANIFEST_KEYS, str(path))
    for key in ("dataset", "arch_kinds", "widths", "depths", "epochs"):
        if key not in config:
            raise UsageError(f"{path}: missing required key {key!r}")
    man = {
        "dataset": config["dataset"],
        "arch_kinds": _to_list(config["arch_kinds"]),
        "widths": [_to_int(v, "widths") for v in _to_list(config["widths"])],
        "depths": [_to_int(v, "depths") for v in _to_list(config["depths"])],
        "molecule_fractions": [_to_float(v, "molecule_fractions")
                               for v in _to_list(config.get("molecule_fractions", "1.0"))],
        "label_fractions": [_to_float(v, "label_fractions")
                            for v in _to_list(config.get("label_fractions", "1.0"))],
        "dataset_ablations": _to_list(config.get("dataset_ablations", "none")),
        "epochs": _to_int(config["epochs"], "epochs"),
        "batch_size": _to_int(config.get("batch_size", "256"), "batch_size"),
        "base_lr": (_to_float(config["base_lr"], "base_lr")
                    if "base_lr" in config else None),
        "warmup_epochs": _to_int(config.get("warmup_epochs", "5"), "warmup_epochs"),
        "n_heads": _to_int(config.get("n_heads", "8"), "n_heads"),
        "record_params": config.get("record_params", "false").lower() == "true",
    }
    if "seeds" in config:
        man["seeds"] = [_to_int(v, "seeds") for v in _to_list(config["seeds"])]
    elif seed_flag is not None:
        man["seeds"] = [seed_flag]
    else:
        raise UsageError(f"{path}: missing required key 'seeds' (or pass --seed)")
    man["base_width"] = _to_int(config.get("base_width", str(min(man["widths"]))),
                                "base_width")
    man["base_depth"] = _to_int(config.get("base_depth", str(min(man["depths"]))),
                                "base_depth")
    for axis in ("arch_kinds", "widths", "depths", "molecule_fractions",
                 "label_fractions", "dataset_ablations", "seeds"):
        if not man[axis]:
            raise UsageError(f"{path}: axis {axis!r} is empty")
    varying = [axis for axis in SCALE_AXES if len(set(man[axis])) > 1]
    if len(varying) > 1:
        raise UsageError(f"{path}: only one scaling axis may vary, got {varying}")
    man["scale_variable"] = SCALE_AXES[varying[0]] if varying else "width"
    return man


def _point_id(point: dict) -> str:
    return (f"{point['arch']}_w{point['width']}_d{point['depth']}"
            f"_mf{point['molecule_fraction']:g}_lf{point['label_fraction']:g}"
            f"_ab-{point['ablation']}_s{point['seed']}")


def _point_hash(point: dict) -> str:
    return hashlib.sha256(
        json.dumps(point, sort_keys=True).encode("utf-8")).hexdigest()


def sweep_points(man: dict) -> list:
    points = []
    for arch in man["arch_kinds"]:
        for width in man["widths"]:
            for depth in man["depths"]:
                for mf in man["molecule_fractions"]:
                    for lf in man["label_fractions"]:
                        for ablation in man["dataset_ablations"]:
                            for seed in man["seeds"]:
                                points.append({
                                    "arch": arch, "width": width, "depth": depth,
                                    "molecule_fraction": mf, "label_fraction": lf,
                                    "ablation": ablation, "seed": seed,
                                    "epochs": man["epochs"],
                                    "batch_size": man["batch_size"],
                                    "base_lr": man["base_lr"],
                                    "warmup_epochs": man["warmup_epochs"],
                                    "n_heads": man["n_heads"],
                                    "base_width": man["base_width"],
                                    "base_depth": man["base_depth"],
                                })
    return points


_MIX_CACHE: dict = {}


def _load_mix_cached(dataset_dir: str) -> DatasetMix:
    if dataset_dir not in _MIX_CACHE:
        _MIX_CACHE[dataset_dir] = load_mix(dataset_dir)
    return _MIX_CACHE[dataset_dir]


def prepare_point_mix(base: DatasetMix, point: dict) -> DatasetMix:
    mix = base
    if point["ablation"] != "none":
        mix = ablate_dataset(mix, point["ablation"])
    if point["molecule_fraction"] != 1.0 or point["label_fraction"] != 1.0:
        mix = subsample(mix, point["molecule_fraction"], point["label_fraction"],
                        seed=point["seed"])
    return mix


def run_sweep_point(dataset_dir: str, point: dict, run_dir: str) -> dict:
    """Pretrain one grid point and write its artifacts; returns metrics.json."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    mix = prepare_point_mix(_load_mix_cached(dataset_dir), point)
    spec = NetworkSpec(
        arch_kind=point["arch"], width=point["width"], depth=point["depth"],
        n_heads=point["n_heads"], task_heads=heads_for_mix(mix),
        width_multiplier=point["width"] / point["base_width"],
        depth_multiplier=point["depth"] / point["base_depth"])
    cfg = TrainConfig(epochs=point["epochs"], batch_size=point["batch_size"],
                      seed=point["seed"], base_lr=point["base_lr"],
                      warmup_epochs=point["warmup_epochs"])
    model, history = pretrain(spec, mix, cfg)
    save_checkpoint(model, run_dir / "checkpoint.gslc")
    history_to_csv(history, run_dir / "history.csv")

    last = history.metrics[-1]
    metrics = {"val": {}, "test": {}}
    for column, value in last.items():
        split, rest = column.split("_", 1)
        task, metric = rest.rsplit("_", 1)
        metrics[split].setdefault(task, {})[metric] = value
    doc = {
        "point": point,
        "config_hash": _point_hash(point),
        "n_params": model.n_params,
        "n_train_molecules": int(len(mix.splits["train"])),
        "n_label_columns": int(sum(t.n_columns for t in mix.tasks)),
        "train_loss_final": history.train_loss[-1],
        "metrics": metrics,
    }
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def _point_done(run_dir: Path, point: dict) -> bool:
    meta = run_dir / "metrics.json"
    if not meta.exists() or not (run_dir / "checkpoint.gslc").exists():
        return False
    try:
        with open(meta) as fh:
            return json.load(fh).get("config_hash") == _point_hash(point)
    except (OSError, json.JSONDecodeError):
        return False


def _scale_value(doc: dict, variable: str) -> float:
    point = doc["point"]
    return {"width": float(point["width"]), "depth": float(point["depth"]),
            "molecules": float(doc["n_train_molecules"]),
            "labels": float(doc["n_label_columns"]),
            "params": float(doc["n_params"])}[variable]


def cmd_sweep(args) -> int:
    man = load_manifest(_require_file(args.manifest, "manifest"), args.seed)
    _require_file(man["dataset"], "dataset directory")
    out = _out_dir(args, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    points = sweep_points(man)
    pending = [p for p in points if not _point_done(out / _point_id(p), p)]
    jobs = max(1, args.jobs or 1)

    failures = {}
    if jobs == 1:
        for point in pending:
            try:
                run_sweep_point(man["dataset"], point, out / _point_id(point))
            except Exception as err:  # point isolation: record and continue
                failures[_point_id(point)] = f"{type(err).__name__}: {err}"
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_sweep_point, man["dataset"], point,
                                   str(out / _point_id(point))): point
                       for point in pending}
            for fut in concurrent.futures.as_completed(futures):
                point = futures[fut]
                try:
                    fut.result()
                except Exception as err:
                    failures[_point_id(point)] = f"{type(err).__name__}: {err}"

    # aggregate in sorted point order from the on-disk artifacts
    docs = []
    for point in points:
        pid = _point_id(point)
        if pid in failures:
            continue
        path = out / pid / "metrics.json"
        if path.exists():
            with open(path) as fh:
                docs.append(json.load(fh))
    docs.sort(key=lambda d: _point_id(d["point"]))

    records = []
    variable = man["scale_variable"]
    for doc in docs:
        if doc["point"]["ablation"] != "none":
            continue
        variables = [variable] + (["params"] if man["record_params"] else [])
        for var in variables:
            for task, metric_map in sorted(doc["metrics"]["test"].items()):
                for metric, value in sorted(metric_map.items()):
                    if value is None:
                        continue
                    records.append(analysis.ScalingRecord(
                        arch_kind=doc["point"]["arch"], scale_variable=var,
                        scale_value=_scale_value(doc, var), task=task,
                        metric=metric, value=value,
                        polarity=METRIC_POLARITY[metric],
                        seed=doc["point"]["seed"]))
    analysis.write_scaling_csv(out / "scaling.csv", records)

    if any(p["ablation"] != "none" for p in points):
        _write_ablation_compare(out / "ablation_compare.csv", docs)

    if failures:
        with open(out / "failures.json", "w") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{len(failures)} of {len(points)} points failed; see failures.json",
              file=sys.stderr)
        raise TrainError(f"sweep finished with {len(failures)} failed point(s)")
    print(f"sweep complete: {len(points)} points, {len(records)} scaling records "
          f"in {out}")
    return 0


def _write_ablation_compare(path, docs) -> None:
    """One row per (point, task, metric): test metrics across ablation variants."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "arch", "width", "depth", "molecule_fraction",
                    "label_fraction", "seed", "task", "metric", "value"])
        for doc in docs:
            p = doc["point"]
            for task, metric_map in sorted(doc["metrics"]["test"].items()):
                for metric, value in sorted(metric_map.items()):
                    w.writerow([p["ablation"], p["arch"], p["width"], p["depth"],
                                repr(float(p["molecule_fraction"])),
                                repr(float(p["label_fraction"])), p["seed"],
                                task, metric,
                                analysis.UNDEFINED_CELL if value is None
                                else repr(float(value))])


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    dataset = _require_file(args.dataset, "dataset directory")
    out = _out_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    mix = load_mix(dataset)
    try:
        spec = NetworkSpec(arch_kind=args.arch, width=args.width, depth=args.depth,
                           n_heads=args.n_heads, task_heads=heads_for_mix(mix),
                           width_multiplier=args.width_multiplier,
                           depth_multiplier=args.depth_multiplier)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          seed=args.seed if args.seed is not None else 0,
                          base_lr=args.base_lr, warmup_epochs=args.warmup_epochs)
    except ValueError as err:
        raise UsageError(str(err)) from None
    model, history = pretrain(spec, mix, cfg)
    save_checkpoint(model, out / "checkpoint.gslc")
    history_to_csv(history, out / "history.csv")
    print(f"pretrained {args.arch} width={args.width} depth={args.depth} "
          f"({model.n_params} params); final train loss "
          f"{history.train_loss[-1]:.6f}; artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# fingerprint
# ---------------------------------------------------------------------------


def cmd_fingerprint(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    dataset = _require_file(args.dataset, "dataset directory")
    out = _out_dir(args, "fingerprints")
    model = load_checkpoint(ckpt)
    mix = load_mix(dataset)
    taps = _to_list(args.taps)
    if not taps:
        raise UsageError("no taps requested")
    valid = graph_level_taps(model.spec)
    for tap in taps:
        if tap not in valid:
            raise UsageError(f"tap {tap!r} is not a graph-level tap of this model; "
                             f"valid taps: {valid}")
    sets = transfer.extract_fingerprints(model, mix, taps, model_id=args.model_id)
    transfer.save_fingerprints(sets, out)
    print(f"wrote {len(sets)} fingerprint set(s) "
          f"({', '.join(f'{s.tap} dim={s.dim}' for s in sets)}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def _load_cache_with_manifest(path: Path) -> transfer.FingerprintSet:
    """Read one cache file, filling source/tap from a sibling manifest if present."""
    manifest = path.parent / "fingerprints.json"
    source, tap = "", ""
    if manifest.exists():
        with open(manifest) as fh:
            for entry in json.load(fh):
                if entry["file"] == path.name:
                    source, tap = entry["source_model_id"], entry["tap"]
                    break
    return transfer.read_cache(path, source, tap)


def _load_downstream(labels_path: Path, splits_path: Path, kind: str):
    """(TaskTable, splits) from a graph-level label CSV and a splits JSON."""
    with open(splits_path) as fh:
        doc = json.load(fh)
    splits = doc["splits"] if "splits" in doc else doc
    for part in ("train", "val", "test"):
        if part not in splits:
            raise UsageError(f"{splits_path}: missing split {part!r}")
    splits = {k: np.asarray(sorted(splits[k]), dtype=np.int64)
              for k in ("train", "val", "test")}
    n = int(max(int(s.max()) for s in splits.values() if s.size)) + 1

    entries = []
    n_cols = 0
    with open(labels_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"molecule", "column", "value"} <= set(
                reader.fieldnames):
            raise UsageError(f"{labels_path}: expected header molecule,column,value")
        for row in reader:
            try:
                idx = int(row["molecule"].lstrip("m"))
                col = int(row["column"])
                val = float(row["value"])
            except ValueError as err:
                raise UsageError(f"{labels_path}: line {reader.line_num}: {err}") from None
            if idx >= n:
                raise UsageError(f"{labels_path}: line {reader.line_num}: molecule "
                                 f"{row['molecule']} outside the split range")
            entries.append((idx, col, val))
            n_cols = max(n_cols, col + 1)
    if not entries:
        raise UsageError(f"{labels_path}: no label rows")
    values = np.zeros((n, n_cols))
    mask = np.zeros((n, n_cols), dtype=bool)
    for idx, col, val in entries:
        values[idx, col] = val
        mask[idx, col] = True
    return TaskTable("downstream", "graph", kind, values, mask), splits


def cmd_probe(args) -> int:
    caches = [_load_cache_with_manifest(_require_file(p, "fingerprint cache"))
              for p in args.cache]
    if args.concat:
        try:
            caches = [transfer.concat_fingerprints(caches)]
        except transfer.TransferError as err:
            raise UsageError(str(err)) from None
    task, splits = _load_downstream(_require_file(args.labels, "label CSV"),
                                    _require_file(args.splits, "splits JSON"),
                                    args.kind)
    seeds = [_to_int(s, "--seeds") for s in _to_list(args.seeds)]
    if not seeds:
        raise UsageError("no seeds given")
    out = _out_dir(args, "probe")
    out.mkdir(parents=True, exist_ok=True)

    report = []
    rows = []
    for fps in caches:
        cfg = transfer.ProbeConfig(seed=seeds[0])
        if len(seeds) == 1:
            res = transfer.probe(fps, task, splits, cfg)
            seed_tests = {seeds[0]: res.test_metric}
            entry = {"source_model_id": fps.source_model_id, "tap": fps.tap,
                     "dim": fps.dim, "metric": res.metric_name,
                     "best_epoch": res.best_epoch,
                     "val_trace": res.val_trace, "test_trace": res.test_trace,
                     "seed_tests": {str(seeds[0]): res.test_metric},
                     "test_metrics": res.test_metrics}
        else:
            ens = transfer.probe_ensemble(fps, task, splits, cfg, seeds)
            seed_tests = ens.seed_tests
            entry = {"source_model_id": fps.source_model_id, "tap": fps.tap,
                     "dim": fps.dim, "metric": ens.metric_name,
                     "best_epoch": ens.best_epoch,
                     "mean_val_trace": ens.mean_val_trace,
                     "seed_tests": {str(s): v for s, v in ens.seed_tests.items()},
                     "mean_test": ens.mean_test}
        report.append(entry)
        for seed in seeds:
            rows.append([fps.source_model_id, fps.tap, fps.dim, seed,
                         entry["best_epoch"], entry["metric"],
                         analysis.UNDEFINED_CELL if seed_tests[seed] is None
                         else repr(float(seed_tests[seed]))])

    with open(out / "tap_compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_model_id", "tap", "dim", "seed", "best_epoch",
                    "metric", "test_value"])
        w.writerows(rows)
    with open(out / "probe_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    shown = ", ".join(f"{r[1]}={r[6]}" for r in rows)
    print(f"probed {len(caches)} fingerprint set(s) x {len(seeds)} seed(s): {shown}; "
          f"reports in {out}")
    return 0


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def cmd_finetune(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    dataset = _require_file(args.dataset, "dataset directory")
    out = _out_dir(args, "finetune")
    model = load_checkpoint(ckpt)
    valid = graph_level_taps(model.spec)
    if args.module not in valid:
        raise UsageError(f"finetune module {args.module!r} is invalid; valid taps: "
                         f"{valid}")
    mix = load_mix(dataset)
    try:
        task = mix.task(args.task)
    except DatasetError as err:
        raise UsageError(str(err)) from None
    if task.level != "graph":
        raise UsageError(f"task {args.task!r} is node-level; finetuning needs a "
                         "graph-level task")
    down = DatasetMix(mix.molecules, (task,), mix.splits)
    cfg = transfer.FinetuneConfig(finetune_module=args.module,
                                  seed=args.seed if args.seed is not None else 0)
    fmodel, res = transfer.finetune(model, down, cfg)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"module": args.module, "task": args.task, "metric": res.metric_name,
           "best_epoch": res.best_epoch, "test_metric": res.test_metric,
           "test_metrics": res.test_metrics, "val_trace": res.val_trace,
           "test_trace": res.test_trace, "base_checksums": res.base_checksums,
           "params": sorted(fmodel.params)}
    with open(out / "finetune_report.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"finetuned after {args.module} on {args.task}: best epoch "
          f"{res.best_epoch}, test {res.metric_name} "
          f"{'undefined' if res.test_metric is None else f'{res.test_metric:.4f}'}; "
          f"report in {out}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    scaling_path = _require_file(args.scaling, "scaling CSV")
    out = _out_dir(args, "analysis")
    try:
        records = analysis.read_scaling_csv(scaling_path)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if not records:
        raise UsageError(f"{scaling_path}: no scaling records (empty input)")
    out.mkdir(parents=True, exist_ok=True)

    try:
        panels = analysis.sweep_summary(records)
    except ValueError as err:
        raise UsageError(str(err)) from None
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "scale_variable", "task", "metric", "trend",
                    "top_scale_z"])
        for (arch, variable), cells in sorted(panels.items()):
            for column in sorted(cells):
                task, metric = column.split("/", 1)
                cell = cells[column]
                w.writerow([arch, variable, task, metric,
                            analysis.UNDEFINED_CELL if cell["trend"] is None
                            else repr(float(cell["trend"])),
                            analysis.UNDEFINED_CELL if cell["top_scale_z"] is None
                            else repr(float(cell["top_scale_z"]))])

    n_fits = 0
    if args.critical is not None:
        variable = args.fit_variable
        if variable is None:
            variables = {r.scale_variable for r in records}
            if len(variables) != 1:
                raise UsageError(f"records span variables {sorted(variables)}; "
                                 "pick one with --fit-variable")
            variable = variables.pop()
        fits = {}
        groups = {}
        for r in records:
            if r.scale_variable == variable:
                groups.setdefault((r.arch_kind, r.task, r.metric), []).append(r)
        for (arch, task, metric), recs in sorted(groups.items()):
            by_scale = {}
            for r in recs:
                by_scale.setdefault(r.scale_value, []).append(r.value)
            points = [(scale, float(np.mean(vals)), recs[0].polarity)
                      for scale, vals in sorted(by_scale.items())]
            try:
                fits[f"{arch}/{variable}/{task}/{metric}"] = analysis.fit_power_law(
                    points, args.critical)
            except ValueError:
                continue  # non-positive values or a degenerate scale axis
        analysis.write_fits_json(out / "fits.json", fits)
        n_fits = len(fits)
    print(f"analyzed {len(records)} records: {len(panels)} summary panel(s), "
          f"{n_fits} power-law fit(s) in {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gnnlab", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common],
                       help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("sweep", parents=[common],
                       help="run a pretraining grid and aggregate scaling records")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pretrain", parents=[common], help="train one model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", required=True, choices=("mpnn", "transformer", "gps"))
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--n-heads", type=int, default=8)
    p.add_argument("--width-multiplier", type=float, default=1.0)
    p.add_argument("--depth-multiplier", type=float, default=1.0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fingerprint", parents=[common],
                       help="extract fingerprint caches from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--taps", default="graph_output_nn")
    p.add_argument("--model-id", default=None)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("probe", parents=[common],
                       help="train probing heads on cached fingerprints")
    p.add_argument("--cache", action="append", required=True)
    p.add_argument("--concat", action="store_true",
                   help="concatenate the caches into one input")
    p.add_argument("--labels", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--kind", required=True, choices=("classification", "regression"))
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", parents=[common],
                       help="trim a checkpoint and finetune on one task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--module", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("analyze", parents=[common],
                       help="summarize scaling records and fit power laws")
    p.add_argument("--scaling", required=True)
    p.add_argument("--critical", type=float, default=None)
    p.add_argument("--fit-variable", default=None,
                   choices=analysis.SCALE_VARIABLES)
    p.set_defaults(func=cmd_analyze)
    return parser


def _fail(kind: str, err: Exception, code: int) -> int:
    print(f"{type(err).__name__}: {err}", file=sys.stderr)
    print(json.dumps({"status": "error", "kind": kind, "message": str(err)},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        return _fail("usage", err, 1)
    try:
        return args.func(args)
    except UsageError as err:
        return _fail("usage", err, 1)
    except Exception as err:  # runtime failure: exit 2 with a machine line
        return _fail("runtime", err, 2)


if __name__ == "__main__":
    sys.exit(main())
