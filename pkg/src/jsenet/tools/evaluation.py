"""Segmentation and edge evaluation tools."""

from typing import Any

from mcp.server.fastmcp import FastMCP

from jsenet.labels import DEFAULT_EDGE_RADIUS
from jsenet.sanitize import to_jsonable


def register(mcp: FastMCP):
    @mcp.tool()
    def evaluate_segmentation(
        prediction_paths: list[str],
        ground_truth_paths: list[str],
        num_classes: int,
    ) -> dict[str, Any]:
        """Compute per-class IoU, mIoU and overall accuracy over one or more scenes.

        Points labelled -1 in the ground truth are ignored. Classes absent from
        both prediction and ground truth are left out of the mean.

        Args:
            prediction_paths: PLY clouds with predicted `label` properties
            ground_truth_paths: Labeled PLY clouds, same order and point count
            num_classes: Class count K
        """
        from jsenet import get_session

        report = get_session().evaluate_segmentation(prediction_paths, ground_truth_paths, num_classes)
        return to_jsonable({"per_class": report.per_class, **report.summary})

    @mcp.tool()
    def evaluate_edges(
        prediction_paths: list[str],
        ground_truth_paths: list[str],
        radius: float = DEFAULT_EDGE_RADIUS,
        boundary: bool = False,
    ) -> dict[str, Any]:
        """Compute the maximum F-measure at the optimal dataset-scale threshold (MF, ODS) per class.

        Counts are pooled over all scenes before the 99-threshold sweep. With
        `boundary`, also returns the boundary F-score of the predicted labels.

        Args:
            prediction_paths: Prediction PLY files written by run_inference
            ground_truth_paths: SEPM files or labeled PLY clouds, same order
            radius: Edge radius in meters used when ground truth is a PLY cloud
            boundary: Also compute the boundary F-score (needs PLY ground truth)
        """
        from jsenet import get_session

        report = get_session().evaluate_edges(prediction_paths, ground_truth_paths, radius, boundary)
        return to_jsonable({"per_class": report.per_class, **report.summary})
