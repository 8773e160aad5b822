import numpy as np
import pytest
from rich.console import Console

from jsenet.errors import ContractError
from jsenet.geometry import PointCloud
from jsenet.labels import SemanticEdgeLabels
from jsenet.metrics import (
    THRESHOLDS,
    ConfusionMatrix,
    ThresholdSweep,
    boundary_fscore,
    edge_report,
    f_measure,
    mf_ods,
    miou,
    segmentation_report,
)


def test_thresholds():
    assert len(THRESHOLDS) == 99
    assert THRESHOLDS[0] == 0.01 and THRESHOLDS[-1] == 0.99


def test_f_measure_without_hits_is_zero():
    assert f_measure(0, 0, 0) == 0.0
    assert f_measure(0, 3, 2) == 0.0
    assert f_measure(2, 0, 0) == 1.0


def test_miou_hand_count():
    per_class, mean = miou(np.array([0, 0, 0, 1]), np.array([0, 0, 1, 1]), 2)
    np.testing.assert_allclose(per_class, [2 / 3, 1 / 2])
    assert mean == pytest.approx(7 / 12)


def test_miou_skips_absent_classes_and_ignored_points():
    per_class, mean = miou(np.array([0, 1, 2]), np.array([0, 1, -1]), 3)
    assert np.isnan(per_class[2])
    assert mean == 1.0


def test_miou_is_invariant_to_relabeling():
    rng = np.random.default_rng(0)
    gt, pred = rng.integers(0, 4, size=200), rng.integers(0, 4, size=200)
    mapping = np.array([2, 0, 3, 1])
    assert miou(mapping[pred], mapping[gt], 4)[1] == pytest.approx(miou(pred, gt, 4)[1])


def test_confusion_merge_equals_concatenation():
    rng = np.random.default_rng(1)
    gt, pred = rng.integers(-1, 3, size=100), rng.integers(0, 3, size=100)
    merged = ConfusionMatrix(3).update(pred[:40], gt[:40]).merge(ConfusionMatrix(3).update(pred[40:], gt[40:]))
    whole = ConfusionMatrix(3).update(pred, gt)
    np.testing.assert_array_equal(merged.counts, whole.counts)
    assert merged.ignored == whole.ignored


def test_confusion_without_points():
    with pytest.raises(ContractError):
        ConfusionMatrix(2).iou()


def test_perfect_edges_score_one():
    gt = SemanticEdgeLabels(np.array([1, 2, 3, 0]), 2)
    result = mf_ods([gt.class_map()], [gt], 2)
    np.testing.assert_array_equal(result.mf, [1.0, 1.0])
    assert result.mmf == 1.0


def test_zero_predictions_score_zero():
    gt = SemanticEdgeLabels(np.array([1, 2, 3, 0]), 2)
    result = mf_ods([np.zeros((4, 2))], [gt], 2)
    assert result.mmf == 0.0


def test_class_without_edges_is_excluded(caplog):
    gt = SemanticEdgeLabels(np.array([1, 0, 1, 0]), 2)
    result = mf_ods([gt.class_map()], [gt], 2)
    assert np.isnan(result.mf[1])
    assert result.mmf == 1.0
    assert "no ground-truth edge points" in caplog.text


def test_sweep_matches_threshold_loop():
    rng = np.random.default_rng(2)
    pred = rng.random((300, 2))
    gt = (rng.random((300, 2)) < 0.2).astype(float)
    sweep = ThresholdSweep(2).update(pred, gt)
    for k in range(2):
        for j, t in enumerate(THRESHOLDS):
            hit, pos = pred[:, k] >= t, gt[:, k] > 0.5
            assert sweep.tp[k, j] == np.sum(hit & pos)
            assert sweep.fp[k, j] == np.sum(hit & ~pos)
            assert sweep.fn[k, j] == np.sum(~hit & pos)


def test_sweep_accumulates_over_scenes():
    rng = np.random.default_rng(3)
    preds = [rng.random((50, 3)) for _ in range(3)]
    gts = [(rng.random((50, 3)) < 0.3).astype(float) for _ in range(3)]
    parts = ThresholdSweep(3)
    for pred, gt in zip(preds, gts):
        parts = parts.merge(ThresholdSweep(3).update(pred, gt))
    whole = ThresholdSweep(3).update(np.concatenate(preds), np.concatenate(gts))
    np.testing.assert_array_equal(parts.tp, whole.tp)
    np.testing.assert_array_equal(parts.fp, whole.fp)


def test_raising_a_missed_edge_does_not_lower_mf():
    rng = np.random.default_rng(4)
    pred = rng.random((100, 1))
    gt = (rng.random((100, 1)) < 0.3).astype(float)
    missed = np.flatnonzero(gt[:, 0] > 0)[0]
    pred[missed] = 0.0
    before = mf_ods([pred], [gt], 1).mmf
    pred[missed] = 1.0
    assert mf_ods([pred], [gt], 1).mmf >= before


def _two_halves() -> PointCloud:
    x = np.arange(20) * 0.01
    return PointCloud(np.stack([x, np.zeros(20), np.zeros(20)], axis=1), labels=(x >= 0.1).astype(int))


def test_boundary_fscore_of_ground_truth_is_one():
    cloud = _two_halves()
    assert boundary_fscore(cloud, cloud.labels, 0.02) == 1.0


def test_boundary_fscore_of_constant_prediction_is_zero():
    cloud = _two_halves()
    assert boundary_fscore(cloud, np.zeros(20, dtype=int), 0.02, 2) == 0.0


def test_boundary_fscore_needs_boundaries():
    cloud = PointCloud(np.random.default_rng(5).random((10, 3)), labels=np.zeros(10))
    with pytest.raises(ContractError):
        boundary_fscore(cloud, cloud.labels, 0.02, 2)


def test_segmentation_report_text():
    report = segmentation_report(ConfusionMatrix(3).update(np.array([0, 0, 0, 1]), np.array([0, 0, 1, 1])))
    assert report.to_text().splitlines() == [
        "iou.class_0 = 0.6667",
        "iou.class_1 = 0.5000",
        "iou.class_2 = nan",
        "miou = 0.5833",
        "accuracy = 0.7500",
    ]


def test_edge_report_with_boundary(tmp_path):
    gt = SemanticEdgeLabels(np.array([1, 0]), 1)
    report = edge_report(mf_ods([gt.class_map()], [gt], 1), boundary=0.5)
    report.write(tmp_path / "r.txt")
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert lines == ["mf.class_0 = 1.0000", "threshold.class_0 = 0.0100", "mmf = 1.0000", "boundary_f = 0.5000"]


def test_report_prints_table():
    console = Console(record=True, width=80)
    segmentation_report(ConfusionMatrix(2).update(np.array([0, 1]), np.array([0, 1]))).print(console)
    assert "miou" in console.export_text()
