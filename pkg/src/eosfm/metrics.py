"""Metric kernels, Distance-To-Best over a result table, and multi-run aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DIRECTIONS = ("higher_better", "lower_better")


def _as_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred, gt = _as_numpy(pred).ravel(), _as_numpy(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    cm = np.bincount(gt.astype(np.int64) * num_classes + pred.astype(np.int64), minlength=num_classes**2)
    return cm.reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over the classes that occur in ``gt`` or ``pred``; absent classes are skipped."""
    if _as_numpy(pred).shape != _as_numpy(gt).shape:
        raise ValueError(f"shape mismatch: pred {_as_numpy(pred).shape} vs gt {_as_numpy(gt).shape}")
    cm = confusion_matrix(pred, gt, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise ValueError("empty label arrays")
    return float((inter[present] / union[present]).mean())


def accuracy(pred, gt) -> float:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return float((pred == gt).mean())


def rmse(pred, gt) -> float:
    pred, gt = _as_numpy(pred).astype(np.float64), _as_numpy(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


# --- result tables ---------------------------------------------------------


class ResultParseError(ValueError):
    pass


class MissingCellError(ResultParseError):
    pass


class UnknownDirectionError(ResultParseError):
    pass


class DuplicateCellError(ResultParseError):
    pass


@dataclass
class ResultTable:
    datasets: list  # [(name, direction)]
    rows: list  # [(model, [score per dataset])]

    def __post_init__(self):
        names = [d for d, _ in self.datasets]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dataset names")
        for d, direction in self.datasets:
            if direction not in DIRECTIONS:
                raise UnknownDirectionError(f"dataset {d!r}: unknown direction {direction!r}")
        for model, scores in self.rows:
            if len(scores) != len(self.datasets):
                raise ValueError(f"row {model!r} has {len(scores)} scores for {len(self.datasets)} datasets")

    @property
    def models(self):
        return [m for m, _ in self.rows]

    def score(self, model, dataset) -> float:
        j = [d for d, _ in self.datasets].index(dataset)
        return dict(self.rows)[model][j]


def best_scores(table: ResultTable) -> list[float]:
    if not table.rows or not table.datasets:
        raise ValueError("empty result table")
    best = []
    for j, (_, direction) in enumerate(table.datasets):
        col = [scores[j] for _, scores in table.rows]
        best.append(max(col) if direction == "higher_better" else min(col))
    return best


def dtb(table: ResultTable) -> list[tuple[str, float]]:
    """Average distance to the best score of each dataset, best taken over every row.

    Returned worst first (descending Avg DTB), as in the benchmark tables.
    """
    best = best_scores(table)
    out = [(m, sum(abs(b - s) for b, s in zip(best, scores)) / len(best)) for m, scores in table.rows]
    return sorted(out, key=lambda r: -r[1])


def top2_counts(table: ResultTable) -> dict[str, int]:
    counts = {m: 0 for m in table.models}
    for j, (_, direction) in enumerate(table.datasets):
        sign = 1 if direction == "higher_better" else -1
        col = {m: sign * scores[j] for m, scores in table.rows}
        for m, v in col.items():
            if sum(1 for u in col.values() if u > v) < 2:
                counts[m] += 1
    return counts


def load_result_table(path) -> ResultTable:
    """Read the long-format ``model,dataset,direction,score`` CSV into a rectangular table."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"model", "dataset", "direction", "score"}:
            raise ResultParseError(f"{path}: header must be model,dataset,direction,score")
        cells, directions, models, datasets = {}, {}, [], []
        for line_no, rec in enumerate(reader, start=2):
            model, ds, direction = rec["model"].strip(), rec["dataset"].strip(), rec["direction"].strip()
            if direction not in DIRECTIONS:
                raise UnknownDirectionError(f"{path}:{line_no}: unknown direction {direction!r}")
            if directions.setdefault(ds, direction) != direction:
                raise ResultParseError(f"{path}:{line_no}: dataset {ds!r} has conflicting directions")
            if (model, ds) in cells:
                raise DuplicateCellError(f"{path}:{line_no}: duplicate cell ({model}, {ds})")
            try:
                score = float(rec["score"])
            except (TypeError, ValueError):
                raise ResultParseError(f"{path}:{line_no}: bad score {rec['score']!r}") from None
            if not math.isfinite(score):
                raise ResultParseError(f"{path}:{line_no}: non-finite score for ({model}, {ds})")
            cells[model, ds] = score
            if model not in models:
                models.append(model)
            if ds not in datasets:
                datasets.append(ds)
    rows = []
    for m in models:
        for d in datasets:
            if (m, d) not in cells:
                raise MissingCellError(f"{path}: missing cell ({m}, {d})")
        rows.append((m, [cells[m, d] for d in datasets]))
    return ResultTable([(d, directions[d]) for d in datasets], rows)


def save_result_table(table: ResultTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dataset", "direction", "score"])
        for model, scores in table.rows:
            for (d, direction), s in zip(table.datasets, scores):
                w.writerow([model, d, direction, repr(float(s))])


def report(table: ResultTable, out_dir) -> dict:
    """Write ``dtb.csv`` (ranked, best first) and ``dtb.svg``; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranked = sorted(dtb(table), key=lambda r: r[1])
    top2 = top2_counts(table)
    csv_path = out_dir / "dtb.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "model", "avg_dtb", "top2_count"])
        for rank, (m, v) in enumerate(ranked, start=1):
            w.writerow([rank, m, f"{v:.4f}", top2[m]])
    svg_path = out_dir / "dtb.svg"
    from .plotting import bar_plot

    bar_plot([m for m, _ in ranked], [v for _, v in ranked], "Avg DTB (lower is better)", svg_path)
    return {"csv": csv_path, "svg": svg_path}


# --- repeated runs ---------------------------------------------------------


@dataclass(frozen=True)
class RunStats:
    values: tuple
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"


def aggregate_runs(values) -> RunStats:
    """Mean and sample (n-1) standard deviation; std is 0 for a single run."""
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError("need at least one run")
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
    return RunStats(vals, mean, std)


def load_runs(path) -> dict[str, list[float]]:
    """Long-format ``dataset,run,value`` CSV grouped by dataset in first-seen order."""
    groups: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"dataset", "value"} <= set(reader.fieldnames):
            raise ResultParseError(f"{path}: header must contain dataset and value")
        for line_no, rec in enumerate(reader, start=2):
            try:
                groups.setdefault(rec["dataset"].strip(), []).append(float(rec["value"]))
            except (TypeError, ValueError):
                raise ResultParseError(f"{path}:{line_no}: bad value {rec['value']!r}") from None
    return groups
