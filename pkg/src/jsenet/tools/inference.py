"""Model inference tools."""

from typing import Any

from mcp.server.fastmcp import FastMCP

from jsenet.sanitize import to_jsonable


def register(mcp: FastMCP):
    @mcp.tool()
    def run_inference(cloud_path: str, output_path: str, sepm_path: str | None = None) -> dict[str, Any]:
        """Predict segmentation and semantic edges for a PLY cloud with the configured checkpoint.

        Spheres on a regular grid cover the scene; their outputs are averaged per
        point and projected back to the original points. The output PLY carries
        the predicted label plus prob_k and edge_k properties.

        Args:
            cloud_path: Input PLY cloud (positions and colors)
            output_path: Destination prediction PLY
            sepm_path: Optional .sepm file for edges thresholded at 0.5
        """
        from jsenet import get_session

        prediction = get_session().infer(cloud_path, output_path, sepm_path)
        counts = {int(k): int((prediction.labels == k).sum()) for k in range(prediction.probs.shape[1])}
        return to_jsonable({
            "output_path": output_path,
            "points": len(prediction.cloud),
            "label_counts": counts,
            "edge_points": int((prediction.edges.max(axis=1) >= 0.5).sum()),
        })

    @mcp.tool()
    def get_model_summary() -> dict[str, Any]:
        """Get parameter counts of the loaded model: segmentation stream (theta),
        edge stream (phi), joint refinement (gamma) and total."""
        from jsenet import get_session

        session = get_session()
        return to_jsonable({"parameters": session.model_summary(), "config": session.config.to_text().splitlines()})
