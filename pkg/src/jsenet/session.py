"""Session wrapper shared by the MCP tools and the CLI: config, lazy model, validated file operations."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np

from jsenet.checkpoint import load_checkpoint
from jsenet.config import TrainConfig
from jsenet.errors import InputError
from jsenet.geometry import sample_mesh
from jsenet.labels import (
    DEFAULT_EDGE_RADIUS,
    SemanticEdgeLabels,
    generate_edge_labels,
    read_sepm,
    skew_weights,
    write_sepm,
)
from jsenet.metrics import (
    ConfusionMatrix,
    Report,
    ThresholdSweep,
    boundary_counts,
    boundary_fscore_from_counts,
    edge_report,
    segmentation_report,
)
from jsenet.model import JSENet
from jsenet.pipeline import Prediction, infer_voting, parallel_map, prepare_scene, read_prediction, write_prediction
from jsenet.ply import read_cloud, read_mesh, write_cloud

logger = logging.getLogger(__name__)


def validate_path(path: str | Path, must_exist: bool = True) -> Path:
    """Validate a file path; existing inputs must be regular files."""
    path = Path(path).expanduser()
    if must_exist and not path.is_file():
        raise InputError(f"File not found: '{path}'.")
    if not must_exist and not path.parent.exists():
        raise InputError(f"Output directory does not exist: '{path.parent}'.")
    return path


def validate_positive(name: str, value: float) -> float:
    if not value > 0:
        raise InputError(f"Invalid {name}: {value}. Expected a positive number.")
    return value


def load_edge_labels(path: Path, radius: float, num_classes: int | None = None) -> SemanticEdgeLabels:
    """SEPM files are read as-is; labeled PLY clouds get edges generated at `radius`."""
    if path.suffix.lower() == ".sepm":
        return read_sepm(path)
    return generate_edge_labels(read_cloud(path), radius, num_classes)


class JSENetSession:
    """Holds the config and, once needed, the model loaded from a checkpoint."""

    def __init__(self, config: TrainConfig | None = None, checkpoint: str | Path | None = None):
        self.config = config
        self.checkpoint = Path(checkpoint) if checkpoint else None
        self._model: JSENet | None = None

    @property
    def model(self) -> JSENet:
        if self._model is None:
            if self.checkpoint is None:
                raise InputError("No checkpoint configured. Set JSENET_CHECKPOINT or pass --checkpoint.")
            self._model = load_checkpoint(validate_path(self.checkpoint), self.config)
            self.config = self._model.config
        return self._model

    # --- Edges ---

    def prepare_edges(
        self,
        cloud_path: str | Path,
        out_path: str | Path,
        radius: float = DEFAULT_EDGE_RADIUS,
        num_classes: int | None = None,
        ignore_triggers: bool = False,
    ) -> dict[str, Any]:
        validate_positive("radius", radius)
        cloud = read_cloud(validate_path(cloud_path))
        labels = generate_edge_labels(cloud, radius, num_classes, ignore_triggers)
        write_sepm(validate_path(out_path, must_exist=False), labels)
        return self._edge_stats(labels)

    def edge_statistics(self, path: str | Path, radius: float = DEFAULT_EDGE_RADIUS) -> dict[str, Any]:
        return self._edge_stats(load_edge_labels(validate_path(path), validate_positive("radius", radius)))

    @staticmethod
    def _edge_stats(labels: SemanticEdgeLabels) -> dict[str, Any]:
        stats: dict[str, Any] = {"points": len(labels), "classes": labels.num_classes}
        if len(labels) == 0:
            return stats
        beta_k, beta = skew_weights(labels)
        class_map = labels.class_map()
        stats["edge_points"] = int(np.count_nonzero(labels.bits))
        stats["beta"] = beta
        stats["per_class"] = [
            {"class": k, "edge_points": int(class_map[:, k].sum()), "beta": float(beta_k[k])}
            for k in range(labels.num_classes)
        ]
        return stats

    # --- Mesh ---

    def sample_mesh(self, mesh_path: str | Path, out_path: str | Path, density: float, seed: int = 0) -> dict[str, Any]:
        validate_positive("density", density)
        mesh = read_mesh(validate_path(mesh_path))
        cloud = sample_mesh(mesh, density, seed)
        write_cloud(validate_path(out_path, must_exist=False), cloud)
        return {"faces": len(mesh.faces), "points": len(cloud), "total_area": float(mesh.face_areas().sum())}

    # --- Inference ---

    def infer(self, cloud_path: str | Path, out_path: str | Path, sepm_path: str | Path | None = None) -> Prediction:
        model = self.model
        cloud = read_cloud(validate_path(cloud_path))
        edges = _no_edges(len(cloud), model.config.num_classes)
        scene = prepare_scene(cloud, model.config, Path(cloud_path).stem, edges=edges)
        prediction = infer_voting(model, scene)
        write_prediction(validate_path(out_path, must_exist=False), prediction)
        if sepm_path:
            write_sepm(validate_path(sepm_path, must_exist=False), prediction.edge_labels())
        return prediction

    def model_summary(self) -> dict[str, int]:
        return self.model.summary()

    # --- Evaluation ---

    def evaluate_segmentation(
        self,
        pred_paths: list[str],
        gt_paths: list[str],
        num_classes: int,
    ) -> Report:
        _check_pairs(pred_paths, gt_paths)

        def one(pair: tuple[str, str]) -> ConfusionMatrix:
            pred = read_cloud(validate_path(pair[0]))
            gt = read_cloud(validate_path(pair[1]))
            if len(pred) != len(gt):
                raise InputError(f"'{pair[0]}' has {len(pred)} points, '{pair[1]}' has {len(gt)}")
            return ConfusionMatrix(num_classes).update(pred.labels, gt.labels)

        matrices = parallel_map(one, list(zip(pred_paths, gt_paths)))
        total = ConfusionMatrix(num_classes)
        for matrix in matrices:
            total = total.merge(matrix)
        return segmentation_report(total)

    def evaluate_edges(
        self,
        pred_paths: list[str],
        gt_paths: list[str],
        radius: float = DEFAULT_EDGE_RADIUS,
        boundary: bool = False,
    ) -> Report:
        """MF at ODS over all scenes; GT may be SEPM files or labeled PLY clouds.

        With `boundary`, GT must be labeled clouds and the boundary F-score of
        the predicted labels is added.
        """
        _check_pairs(pred_paths, gt_paths)
        validate_positive("radius", radius)

        def one(pair: tuple[str, str]) -> tuple[ThresholdSweep, tuple[int, int, int] | None]:
            prediction = read_prediction(validate_path(pair[0]))
            k = prediction.edges.shape[1]
            gt_path = validate_path(pair[1])
            gt = load_edge_labels(gt_path, radius, k)
            if len(gt) != len(prediction.cloud):
                raise InputError(f"'{pair[0]}' has {len(prediction.cloud)} points, '{pair[1]}' has {len(gt)}")
            sweep = ThresholdSweep(k).update(prediction.edges, gt)
            if not boundary:
                return sweep, None
            if gt_path.suffix.lower() == ".sepm":
                raise InputError("boundary F-score needs labeled PLY ground truth")
            return sweep, boundary_counts(read_cloud(gt_path), prediction.labels, radius, k)

        parts = parallel_map(one, list(zip(pred_paths, gt_paths)))
        sweep = parts[0][0]
        for other, _ in parts[1:]:
            sweep = sweep.merge(other)
        score = None
        if boundary:
            score = boundary_fscore_from_counts(*(sum(p[1][i] for p in parts) for i in range(3)))
        return edge_report(sweep.result(), boundary=score)


def _check_pairs(preds: list[str], gts: list[str]) -> None:
    if not preds:
        raise InputError("No prediction files given.")
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} prediction files but {len(gts)} ground-truth files.")


def _no_edges(n: int, k: int) -> SemanticEdgeLabels:
    return SemanticEdgeLabels(np.zeros(n, dtype=np.uint64), k)
