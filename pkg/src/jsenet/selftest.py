"""Oracle suites: fast implementations against brute-force loops, plus a report
over a labeled fixture cloud that can be compared with a committed golden file."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from jsenet import tensor as T
from jsenet.edgegen import build_mean_filter, emg, emg_gt
from jsenet.geometry import PointCloud, build_index, grid_subsample, radius_neighbors
from jsenet.labels import generate_edge_labels, one_hot, skew_weights, to_binary_edges, transfer_to_subsampled
from jsenet.metrics import THRESHOLDS, ThresholdSweep, boundary_fscore, f_measure, miou
from jsenet.ply import read_cloud
from jsenet.tensor import Tensor

logger = logging.getLogger(__name__)

FIXTURES = 20
FIXTURE_POINTS = 500
FIXTURE_RADIUS = 0.05


def random_cloud(rng: np.random.Generator, n: int = FIXTURE_POINTS, num_classes: int = 3) -> PointCloud:
    """Points in a 0.4 m cube; one in ten ignore-labelled."""
    labels = rng.integers(0, num_classes, size=n)
    labels[rng.random(n) < 0.1] = -1
    return PointCloud(rng.uniform(0.0, 0.4, size=(n, 3)), rng.random((n, 3)), labels)


# --- Brute-force oracles ---

def brute_neighbors(positions: np.ndarray, query: np.ndarray, r: float) -> np.ndarray:
    return np.flatnonzero(np.sum((positions - query) ** 2, axis=1) <= r * r)


def brute_edge_bits(cloud: PointCloud, r: float) -> np.ndarray:
    bits = np.zeros(len(cloud), dtype=np.uint64)
    for i, p in enumerate(cloud.positions):
        classes = {int(label) for label in cloud.labels[brute_neighbors(cloud.positions, p, r)] if label >= 0}
        if classes - {int(cloud.labels[i])}:
            for c in classes:
                bits[i] |= np.uint64(1) << np.uint64(c)
    return bits


def brute_subsample(cloud: PointCloud, cell: float) -> tuple[np.ndarray, np.ndarray]:
    """Barycenters ordered by cell coordinates, and each point's cell row."""
    cells: dict[tuple[int, ...], list[int]] = {}
    for i, p in enumerate(cloud.positions):
        cells.setdefault(tuple(int(c) for c in np.floor(p / cell)), []).append(i)
    keys = sorted(cells)
    assignment = np.zeros(len(cloud), dtype=np.int64)
    centers = np.zeros((len(keys), 3))
    for row, key in enumerate(keys):
        members = cells[key]
        assignment[members] = row
        centers[row] = cloud.positions[members].mean(axis=0)
    return centers, assignment


def brute_miou(pred: np.ndarray, gt: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    ious = np.full(k, np.nan)
    for c in range(k):
        tp = fp = fn = 0
        for p, g in zip(pred, gt):
            if g < 0:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn:
            ious[c] = tp / (tp + fp + fn)
    return ious, float(np.nanmean(ious))


def brute_sweep(preds: list[np.ndarray], gts: list[np.ndarray]) -> np.ndarray:
    """F-measure per class and threshold, counts pooled over all scenes."""
    k = preds[0].shape[1]
    scores = np.zeros((k, len(THRESHOLDS)))
    for c in range(k):
        for j, t in enumerate(THRESHOLDS):
            tp = fp = fn = 0
            for pred, gt in zip(preds, gts):
                hit, pos = pred[:, c] >= t, gt[:, c] > 0.5
                tp += int(np.sum(hit & pos))
                fp += int(np.sum(hit & ~pos))
                fn += int(np.sum(~hit & pos))
            scores[c, j] = f_measure(tp, fp, fn)
    return scores


# --- Suites ---

@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""


def _suite_radius_neighbors(rng: np.random.Generator) -> str | None:
    cloud = random_cloud(rng)
    index = build_index(cloud, FIXTURE_RADIUS)
    for q in cloud.positions[:50]:
        if not np.array_equal(radius_neighbors(index, q, FIXTURE_RADIUS), brute_neighbors(cloud.positions, q, FIXTURE_RADIUS)):
            return f"neighbors of {q} differ"
    return None


def _suite_edge_labels(rng: np.random.Generator) -> str | None:
    cloud = random_cloud(rng)
    bits = generate_edge_labels(cloud, FIXTURE_RADIUS, 3).bits
    expected = brute_edge_bits(cloud, FIXTURE_RADIUS)
    if not np.array_equal(bits, expected):
        return f"{np.count_nonzero(bits != expected)} bitmasks differ"
    return None


def _suite_grid_subsample(rng: np.random.Generator) -> str | None:
    cloud = random_cloud(rng)
    sub = grid_subsample(cloud, 0.04)
    centers, assignment = brute_subsample(cloud, 0.04)
    if not np.array_equal(sub.assignment, assignment):
        return "cell assignment differs"
    if not np.allclose(sub.cloud.positions, centers, rtol=0.0, atol=1e-12):
        return "barycenters differ"
    return None


def _suite_miou(rng: np.random.Generator) -> str | None:
    gt = rng.integers(-1, 4, size=FIXTURE_POINTS)
    pred = np.where(rng.random(FIXTURE_POINTS) < 0.7, np.maximum(gt, 0), rng.integers(0, 4, size=FIXTURE_POINTS))
    ious, mean = miou(pred, gt, 4)
    expected, expected_mean = brute_miou(pred, gt, 4)
    if not (np.allclose(ious, expected, equal_nan=True) and np.isclose(mean, expected_mean)):
        return f"mIoU {mean} vs {expected_mean}"
    return None


def _suite_mf_ods(rng: np.random.Generator) -> str | None:
    preds = [rng.random((FIXTURE_POINTS // 2, 3)) for _ in range(2)]
    gts = [(rng.random((FIXTURE_POINTS // 2, 3)) < 0.2).astype(np.float64) for _ in range(2)]
    sweep = ThresholdSweep(3)
    for pred, gt in zip(preds, gts):
        sweep.update(pred, gt)
    expected = brute_sweep(preds, gts)
    if not np.allclose(sweep.f_scores(), expected, rtol=0.0, atol=1e-15):
        return "per-threshold F-measures differ"
    return None


def _suite_boundary(rng: np.random.Generator) -> str | None:
    cloud = random_cloud(rng)
    cloud.labels[cloud.labels < 0] = 0
    pred = np.where(rng.random(len(cloud)) < 0.8, cloud.labels, rng.integers(0, 3, size=len(cloud)))
    score = boundary_fscore(cloud, pred, FIXTURE_RADIUS, 3)
    gt_set = set(np.flatnonzero(brute_edge_bits(cloud, FIXTURE_RADIUS)))
    pred_set = set(np.flatnonzero(brute_edge_bits(PointCloud(cloud.positions, labels=pred), FIXTURE_RADIUS)))
    tp = len(gt_set & pred_set)
    precision = tp / len(pred_set) if pred_set else 0.0
    recall = tp / len(gt_set)
    expected = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    if not np.isclose(score, expected, rtol=0.0, atol=1e-12):
        return f"boundary F {score} vs {expected}"
    return None


ORACLE_SUITES: dict[str, Callable[[np.random.Generator], str | None]] = {
    "radius_neighbors": _suite_radius_neighbors,
    "edge_labels": _suite_edge_labels,
    "grid_subsample": _suite_grid_subsample,
    "miou": _suite_miou,
    "mf_ods": _suite_mf_ods,
    "boundary_fscore": _suite_boundary,
}


def emg_hand_cases() -> str | None:
    with T.precision(np.float64):
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]]), labels=np.array([0, 1]))
        spec = build_mean_filter(cloud, 0.02)
        constant = emg(Tensor(np.full((2, 2), 0.5)), spec).data
        if np.any(constant != 0.0):
            return "constant mask gives nonzero activations"
        target = one_hot(cloud.labels, 2)
        pair = emg(Tensor(target.values), spec).data
        if np.any(pair != 0.5):
            return f"two-point case gives {pair.tolist()}"
        if not np.array_equal(pair, emg_gt(target, spec)):
            return "emg of one-hot differs from emg_gt"
    return None


def run_oracle_suites(seed: int = 0, fixtures: int = FIXTURES) -> list[SuiteResult]:
    results = []
    for name, suite in ORACLE_SUITES.items():
        failure = None
        for i in range(fixtures):
            failure = suite(np.random.default_rng([seed, i]))
            if failure:
                failure = f"fixture {i}: {failure}"
                break
        results.append(SuiteResult(name, failure is None, failure or ""))
        logger.debug("oracle %s: %s", name, failure or "ok")
    failure = emg_hand_cases()
    results.append(SuiteResult("emg_hand_cases", failure is None, failure or ""))
    return results


# --- Fixture report ---

@dataclass
class SelftestReport:
    results: list[SuiteResult]
    values: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"oracle.{r.name} = {'pass' if r.passed else 'FAIL'}" for r in self.results]
        lines += [f"{key} = {value}" for key, value in self.values.items()]
        return "\n".join(lines) + "\n"


def fixture_values(cloud: PointCloud, radius: float, cell: float) -> dict[str, str]:
    k = int(cloud.labels.max()) + 1
    edges = generate_edge_labels(cloud, radius, k)
    beta_k, beta = skew_weights(edges)
    sub = grid_subsample(cloud, cell)
    merged = transfer_to_subsampled(edges, sub.assignment, len(sub.cloud))
    activations = emg_gt(one_hot(cloud.labels, k), build_mean_filter(cloud, radius))
    sweep = ThresholdSweep(k).update(edges.class_map(), edges)
    values = {
        "points": str(len(cloud)),
        "classes": str(k),
        "edge_points": str(int(to_binary_edges(edges).sum())),
        "beta": f"{beta:.4f}",
    }
    values.update({f"beta.class_{c}": f"{b:.4f}" for c, b in enumerate(beta_k)})
    values["subsampled_points"] = str(len(sub.cloud))
    values["subsampled_edge_points"] = str(int(to_binary_edges(merged).sum()))
    values["emg_active_points"] = str(int(np.count_nonzero(activations.max(axis=1) > 0)))
    values["miou_self"] = f"{miou(cloud.labels, cloud.labels, k)[1]:.4f}"
    values["mmf_self"] = f"{sweep.result().mmf:.4f}"
    values["boundary_f_self"] = f"{boundary_fscore(cloud, cloud.labels, radius, k):.4f}"
    return values


def run_selftest(
    fixture: str | Path,
    radius: float = 0.015625,
    cell: float = 0.015625,
    seed: int = 0,
    fixtures: int = FIXTURES,
) -> SelftestReport:
    cloud = read_cloud(fixture)
    return SelftestReport(run_oracle_suites(seed, fixtures), fixture_values(cloud, radius, cell))


def compare_golden(report: SelftestReport, golden: str | Path) -> list[str]:
    """Lines that differ from the golden file, as 'expected -> got'."""
    expected = Path(golden).read_text(encoding="utf-8").splitlines()
    got = report.to_text().splitlines()
    diffs = [f"{e!r} -> {g!r}" for e, g in zip(expected, got) if e != g]
    if len(expected) != len(got):
        diffs.append(f"{len(expected)} golden lines, {len(got)} report lines")
    return diffs
