"""Evaluation metrics, score standardization, scaling-trend statistics, and
power-law fitting.

Metric functions return ``None`` when the quantity is undefined (single-class
AUROC, zero-variance correlations); the CSV layer writes those as the literal
cell ``undefined``. Nothing here silently maps an undefined value to zero.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

POLARITIES = ("higher", "lower")
UNDEFINED_CELL = "undefined"


def _as_vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def average_ranks(x) -> np.ndarray:
    """Ranks starting at 1; tied values share the mean of their rank range."""
    a = _as_vector(x, "x")
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.shape[0], dtype=np.float64)
    i = 0
    while i < a.shape[0]:
        j = i
        while j + 1 < a.shape[0] and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auroc(scores, labels) -> float | None:
    """P(score of a positive > score of a negative) + half credit for ties.

    Computed from rank statistics; returns None when only one class is
    present.
    """
    s = _as_vector(scores, "scores")
    y = _as_vector(labels, "labels")
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    n_pos = int(np.sum(y == 1.0))
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = average_ranks(s)
    rank_sum = float(np.sum(r[y == 1.0]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float | None:
    """Average precision: step integral of precision over recall.

    Tied scores are processed as one threshold group so the value does not
    depend on the order ties happen to appear in.
    """
    s = _as_vector(scores, "scores")
    y = _as_vector(labels, "labels")
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    n_pos = int(np.sum(y == 1.0))
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    ap = 0.0
    seen = 0
    tp = 0
    i = 0
    n = s.shape[0]
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        group_tp = int(np.sum(y_sorted[i:j + 1]))
        seen += j - i + 1
        tp += group_tp
        if group_tp:
            ap += (group_tp / n_pos) * (tp / seen)
        i = j + 1
    return ap


def mae(x, y) -> float:
    a, b = _as_vector(x, "x"), _as_vector(y, "y")
    if a.shape != b.shape:
        raise ValueError("inputs must have equal length")
    if a.size == 0:
        raise ValueError("mae of empty input")
    return float(np.mean(np.abs(a - b)))


def pearson(x, y) -> float | None:
    a, b = _as_vector(x, "x"), _as_vector(y, "y")
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need equal lengths >= 2")
    ac, bc = a - a.mean(), b - b.mean()
    va, vb = float(np.sum(ac * ac)), float(np.sum(bc * bc))
    if va == 0.0 or vb == 0.0:
        return None
    return float(np.sum(ac * bc) / math.sqrt(va * vb))


def spearman(x, y) -> float | None:
    """Pearson correlation of average ranks (ties averaged)."""
    a, b = _as_vector(x, "x"), _as_vector(y, "y")
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need equal lengths >= 2")
    return pearson(average_ranks(a), average_ranks(b))


# ---------------------------------------------------------------------------
# Score tables and standardization
# ---------------------------------------------------------------------------


@dataclass
class ScoreTable:
    """Models x tasks score matrix with one polarity per task column."""

    polarity: dict = field(default_factory=dict)  # task -> higher|lower
    values: dict = field(default_factory=dict)  # model -> task -> value

    def add(self, model: str, task: str, value: float, polarity: str) -> None:
        if polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")
        if task in self.polarity and self.polarity[task] != polarity:
            raise ValueError(f"conflicting polarity for task {task!r}")
        self.polarity[task] = polarity
        self.values.setdefault(model, {})[task] = float(value)

    def models(self) -> list:
        return sorted(self.values)

    def tasks(self) -> list:
        return sorted(self.polarity)

    def column(self, task: str) -> dict:
        return {m: row[task] for m, row in self.values.items() if task in row}


@dataclass(frozen=True)
class StandardizedScores:
    z: dict  # model -> task -> z-score
    model_means: dict  # model -> mean z over its columns (None if no columns)
    warnings: dict  # task -> reason the column is degenerate


def standardized_scores(table: ScoreTable) -> StandardizedScores:
    """Polarity-corrected per-column z-scores plus per-model means.

    Population standard deviation throughout. A zero-variance column is
    flagged in ``warnings`` and its entries standardize to 0 (every value
    equals the column mean); columns with fewer than 2 entries are flagged
    and excluded entirely.
    """
    z, warnings = {}, {}
    for task in table.tasks():
        col = table.column(task)
        if len(col) < 2:
            warnings[task] = "fewer than 2 entries"
            continue
        vals = np.array([col[m] for m in sorted(col)])
        std = float(vals.std())
        sign = 1.0 if table.polarity[task] == "higher" else -1.0
        if std == 0.0:
            warnings[task] = "zero variance"
            for m in col:
                z.setdefault(m, {})[task] = 0.0
            continue
        mean = float(vals.mean())
        for m in col:
            z.setdefault(m, {})[task] = sign * (col[m] - mean) / std
    means = {}
    for m in table.models():
        row = z.get(m, {})
        means[m] = float(np.mean(list(row.values()))) if row else None
    return StandardizedScores(z=z, model_means=means, warnings=warnings)


def normalized_performance(model_scores: dict, leaderboard: ScoreTable) -> float:
    """Average leaderboard-relative z-score of one model across tasks."""
    zs = []
    for task, value in sorted(model_scores.items()):
        if task not in leaderboard.polarity:
            continue
        col = leaderboard.column(task)
        if len(col) < 2:
            continue
        vals = np.array([col[m] for m in sorted(col)])
        std = float(vals.std())
        if std == 0.0:
            continue
        sign = 1.0 if leaderboard.polarity[task] == "higher" else -1.0
        zs.append(sign * (float(value) - float(vals.mean())) / std)
    if not zs:
        raise ValueError("no overlap between model scores and leaderboard")
    return float(np.mean(zs))


# ---------------------------------------------------------------------------
# Scaling trends
# ---------------------------------------------------------------------------

SCALE_VARIABLES = ("params", "molecules", "labels", "depth", "width")


@dataclass(frozen=True)
class ScalingRecord:
    arch_kind: str
    scale_variable: str
    scale_value: float
    task: str
    metric: str
    value: float
    polarity: str
    seed: int

    def __post_init__(self):
        if self.scale_variable not in SCALE_VARIABLES:
            raise ValueError(f"scale_variable must be one of {SCALE_VARIABLES}")
        if self.scale_value <= 0:
            raise ValueError("scale_value must be positive")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


def scaling_spearman(records) -> float | None:
    """Spearman between scale and polarity-adjusted metric.

    Seeds are averaged per scale point first; needs >= 3 distinct scale
    values. Records must share a polarity.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    polarities = {r.polarity for r in records}
    if len(polarities) > 1:
        raise ValueError("records mix polarities")
    sign = 1.0 if records[0].polarity == "higher" else -1.0
    by_scale = {}
    for r in records:
        by_scale.setdefault(r.scale_value, []).append(r.value)
    if len(by_scale) < 3:
        raise ValueError(f"need >= 3 distinct scale values, got {len(by_scale)}")
    scales = sorted(by_scale)
    means = [sign * float(np.mean(by_scale[s])) for s in scales]
    return spearman(scales, means)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    critical_scale: float
    intercept: float
    residual_rms: float


def fit_power_law(points, critical_scale: float) -> PowerLawFit:
    """Least-squares log-log fit of value ~ (critical/scale)^exponent.

    ``points`` are (scale, value, polarity) triples. For lower-is-better
    values (losses) the regressor is log(critical/scale); for higher-is-better
    metrics the ratio is inverted to log(scale/critical), so a positive
    exponent always means improvement with scale.
    """
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("need >= 2 points")
    if critical_scale <= 0:
        raise ValueError("critical_scale must be positive")
    polarities = {p[2] for p in pts}
    if len(polarities) != 1 or not polarities.issubset(set(POLARITIES)):
        raise ValueError("points must share one valid polarity")
    polarity = pts[0][2]
    xs, ys = [], []
    for scale, value, _ in pts:
        if scale <= 0:
            raise ValueError("scales must be positive")
        if value <= 0:
            raise ValueError(f"cannot log-fit non-positive value {value}")
        if polarity == "lower":
            xs.append(math.log(critical_scale / scale))
        else:
            xs.append(math.log(scale / critical_scale))
        ys.append(math.log(value))
    x = np.array(xs)
    y = np.array(ys)
    xc = x - x.mean()
    denom = float(np.sum(xc * xc))
    if denom == 0.0:
        raise ValueError("all points share one scale; slope undefined")
    slope = float(np.sum(xc * (y - y.mean())) / denom)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    return PowerLawFit(exponent=slope, critical_scale=float(critical_scale),
                       intercept=intercept,
                       residual_rms=float(np.sqrt(np.mean(resid * resid))))


def sweep_summary(records) -> dict:
    """Figure-2-shaped matrix: task rows x (arch, scale_variable) columns.

    Each cell standardizes the seed-averaged metric across that panel's scale
    points and reports the top-scale model's z together with the scaling
    trend. Requires >= 2 archs or >= 3 distinct scale values overall.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    archs = {r.arch_kind for r in records}
    scale_values = {r.scale_value for r in records}
    if len(archs) < 2 and len(scale_values) < 3:
        raise ValueError("records span too little: need >= 2 archs or >= 3 scale values")

    panels = {}
    for r in records:
        panels.setdefault((r.arch_kind, r.scale_variable), []).append(r)
    out = {}
    for (arch, var), recs in sorted(panels.items()):
        table = ScoreTable()
        by_cell = {}
        for r in recs:
            by_cell.setdefault((r.scale_value, r.task, r.metric), []).append(r.value)
        for (scale, task, metric), vals in by_cell.items():
            pol = next(r.polarity for r in recs
                       if (r.scale_value, r.task, r.metric) == (scale, task, metric))
            table.add(f"scale={scale:g}", f"{task}/{metric}", float(np.mean(vals)), pol)
        std = standardized_scores(table)
        top = f"scale={max(r.scale_value for r in recs):g}"
        cells = {}
        for column in table.tasks():
            task, metric = column.split("/", 1)
            sub = [r for r in recs if r.task == task and r.metric == metric]
            try:
                trend = scaling_spearman(sub)
            except ValueError:
                trend = None
            cells[column] = {
                "trend": trend,
                "top_scale_z": std.z.get(top, {}).get(column),
            }
        out[(arch, var)] = cells
    return out


# ---------------------------------------------------------------------------
# CSV / JSON emission
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    return UNDEFINED_CELL if v is None else repr(float(v))


def _parse_cell(s: str) -> float | None:
    return None if s == UNDEFINED_CELL else float(s)


def write_scores_csv(path, table: ScoreTable, metric_names: dict | None = None) -> None:
    """Rows: model, task, metric, value, polarity. Sorted for determinism."""
    metric_names = metric_names or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "task", "metric", "value", "polarity"])
        for model in table.models():
            for task in sorted(table.values[model]):
                w.writerow([model, task, metric_names.get(task, "score"),
                            _cell(table.values[model][task]), table.polarity[task]])


def read_scores_csv(path) -> ScoreTable:
    table = ScoreTable()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                value = _parse_cell(row["value"])
                if value is not None:
                    table.add(row["model"], row["task"], value, row["polarity"])
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}: line {reader.line_num}: bad score row "
                                 f"({err})") from err
    return table


def write_scaling_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "scale_variable", "scale_value", "task", "metric",
                    "value", "polarity", "seed"])
        key = lambda r: (r.arch_kind, r.scale_variable, r.scale_value, r.task,
                         r.metric, r.seed)
        for r in sorted(records, key=key):
            w.writerow([r.arch_kind, r.scale_variable, repr(float(r.scale_value)),
                        r.task, r.metric, _cell(r.value), r.polarity, r.seed])


def read_scaling_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                value = _parse_cell(row["value"])
                if value is None:
                    continue
                out.append(ScalingRecord(
                    arch_kind=row["arch"], scale_variable=row["scale_variable"],
                    scale_value=float(row["scale_value"]), task=row["task"],
                    metric=row["metric"], value=value, polarity=row["polarity"],
                    seed=int(row["seed"])))
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}: line {reader.line_num}: bad scaling row "
                                 f"({err})") from err
    return out


def write_fits_json(path, fits: dict) -> None:
    """``fits`` maps a fit name to a PowerLawFit."""
    doc = {
        name: {
            "exponent": f.exponent,
            "critical_scale": f.critical_scale,
            "intercept": f.intercept,
            "residual_rms": f.residual_rms,
        }
        for name, f in sorted(fits.items())
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
