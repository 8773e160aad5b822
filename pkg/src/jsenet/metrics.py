"""Evaluation: confusion-matrix mIoU, dataset-scale MF at ODS, boundary F-score, reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table

from jsenet.errors import ContractError, DimensionError
from jsenet.geometry import PointCloud
from jsenet.labels import DEFAULT_EDGE_RADIUS, SemanticEdgeLabels, generate_edge_labels, to_binary_edges

logger = logging.getLogger(__name__)

THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


def f_measure(tp, fp, fn) -> np.ndarray:
    """2PR / (P + R), zero where P + R = 0 (so also where tp = 0)."""
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2.0 * tp + fp + fn
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


# --- Segmentation ---

@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predictions."""

    num_classes: int
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise DimensionError("confusion", pred.shape, gt.shape)
        valid = gt >= 0
        k = self.num_classes
        if valid.any() and (gt[valid].max() >= k or pred[valid].min() < 0 or pred[valid].max() >= k):
            raise ContractError(f"labels out of range for K={k}")
        self.counts += np.bincount(gt[valid] * k + pred[valid], minlength=k * k).reshape(k, k)
        self.ignored += int(np.count_nonzero(~valid))
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> tuple[np.ndarray, float]:
        """Per-class IoU (NaN for classes absent from both) and their mean."""
        if self.total == 0:
            raise ContractError("no valid points to evaluate")
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        per_class = np.divide(tp, union, out=np.full_like(tp, np.nan), where=union > 0)
        return per_class, float(np.nanmean(per_class))

    def accuracy(self) -> float:
        if self.total == 0:
            raise ContractError("no valid points to evaluate")
        return float(np.trace(self.counts)) / self.total


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    return ConfusionMatrix(num_classes).update(pred, gt).iou()


# --- Edges ---

@dataclass
class ThresholdSweep:
    """Per-class, per-threshold TP/FP/FN accumulated over a whole dataset."""

    num_classes: int
    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.num_classes, len(self.thresholds))
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.int64))

    def update(self, pred: np.ndarray, gt: SemanticEdgeLabels | np.ndarray) -> "ThresholdSweep":
        """pred: (N, K) edge values in [0, 1]; gt: edge labels or an (N, K) 0/1 map."""
        target = gt.class_map() if isinstance(gt, SemanticEdgeLabels) else np.asarray(gt, dtype=np.float64)
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != target.shape or pred.shape[1] != self.num_classes:
            raise DimensionError("threshold_sweep", pred.shape, target.shape)
        positive = target > 0.5
        # Count predictions >= t by sorting each class column once.
        for k in range(self.num_classes):
            pos_scores = np.sort(pred[positive[:, k], k])
            neg_scores = np.sort(pred[~positive[:, k], k])
            above_pos = len(pos_scores) - np.searchsorted(pos_scores, self.thresholds, side="left")
            above_neg = len(neg_scores) - np.searchsorted(neg_scores, self.thresholds, side="left")
            self.tp[k] += above_pos
            self.fp[k] += above_neg
            self.fn[k] += len(pos_scores) - above_pos
        return self

    def merge(self, other: "ThresholdSweep") -> "ThresholdSweep":
        if other.num_classes != self.num_classes or not np.array_equal(other.thresholds, self.thresholds):
            raise ContractError("cannot merge sweeps over different classes or thresholds")
        return ThresholdSweep(self.num_classes, self.thresholds, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def f_scores(self) -> np.ndarray:
        return f_measure(self.tp, self.fp, self.fn)

    def result(self) -> "EdgeReport":
        scores = self.f_scores()
        positives = self.tp[:, 0] + self.fn[:, 0]
        has_gt = positives > 0
        for k in np.flatnonzero(~has_gt):
            logger.warning("Class %d has no ground-truth edge points; excluded from the mean MF", k)
        per_class = np.where(has_gt, scores.max(axis=1), np.nan)
        best = np.where(has_gt, self.thresholds[scores.argmax(axis=1)], np.nan)
        mean = float(np.nanmean(per_class)) if has_gt.any() else float("nan")
        return EdgeReport(per_class, mean, best)


@dataclass
class EdgeReport:
    mf: np.ndarray
    mmf: float
    best_thresholds: np.ndarray


def mf_ods(preds: list[np.ndarray], gts: list[SemanticEdgeLabels | np.ndarray], num_classes: int) -> EdgeReport:
    """Maximum F-measure at the optimal dataset-scale threshold, per class and mean."""
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground truths")
    sweep = ThresholdSweep(num_classes)
    for pred, gt in zip(preds, gts):
        sweep.update(pred, gt)
    return sweep.result()


def boundary_counts(
    cloud: PointCloud,
    pred_labels: np.ndarray,
    radius: float = DEFAULT_EDGE_RADIUS,
    num_classes: int | None = None,
) -> tuple[int, int, int]:
    """(tp, fp, fn) between the binarized edge labels of `pred_labels` and of the cloud's own labels."""
    k = num_classes or max(int(cloud.labels.max(initial=-1)), int(np.max(pred_labels, initial=-1))) + 1
    gt_edges = to_binary_edges(generate_edge_labels(cloud, radius, k)) > 0
    predicted = PointCloud(cloud.positions, cloud.colors, pred_labels)
    pred_edges = to_binary_edges(generate_edge_labels(predicted, radius, k)) > 0
    tp = np.count_nonzero(pred_edges & gt_edges)
    fp = np.count_nonzero(pred_edges & ~gt_edges)
    fn = np.count_nonzero(~pred_edges & gt_edges)
    return int(tp), int(fp), int(fn)


def boundary_fscore_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fn == 0:
        raise ContractError("ground truth has no boundary points")
    return float(f_measure(tp, fp, fn))


def boundary_fscore(
    cloud: PointCloud,
    pred_labels: np.ndarray,
    radius: float = DEFAULT_EDGE_RADIUS,
    num_classes: int | None = None,
) -> float:
    """Point-wise F-measure between boundaries of predicted and ground-truth labels.

    Both boundaries come from the edge labelling rule at `radius`, binarized.
    """
    return boundary_fscore_from_counts(*boundary_counts(cloud, pred_labels, radius, num_classes))


# --- Reports ---

@dataclass
class Report:
    title: str
    per_class: dict[str, float]
    summary: dict[str, float]

    def table(self) -> Table:
        table = Table(title=self.title)
        table.add_column("key")
        table.add_column("value", justify="right")
        for key, value in {**self.per_class, **self.summary}.items():
            table.add_row(key, _fmt(value))
        return table

    def print(self, console: Console | None = None) -> None:
        (console or Console()).print(self.table())

    def to_text(self) -> str:
        return "".join(f"{key} = {_fmt(value)}\n" for key, value in {**self.per_class, **self.summary}.items())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _fmt(value: float) -> str:
    return "nan" if np.isnan(value) else f"{value:.4f}"


def segmentation_report(matrix: ConfusionMatrix, class_names: list[str] | None = None) -> Report:
    names = class_names or [f"class_{k}" for k in range(matrix.num_classes)]
    per_class, mean = matrix.iou()
    return Report(
        "Semantic segmentation",
        {f"iou.{name}": float(v) for name, v in zip(names, per_class)},
        {"miou": mean, "accuracy": matrix.accuracy()},
    )


def edge_report(result: EdgeReport, class_names: list[str] | None = None, boundary: float | None = None) -> Report:
    names = class_names or [f"class_{k}" for k in range(len(result.mf))]
    per_class = {}
    for name, mf, t in zip(names, result.mf, result.best_thresholds):
        per_class[f"mf.{name}"] = float(mf)
        per_class[f"threshold.{name}"] = float(t)
    summary = {"mmf": result.mmf}
    if boundary is not None:
        summary["boundary_f"] = boundary
    return Report("Semantic edge detection", per_class, summary)
