"""Ground-truth semantic edge label tools."""

from typing import Any

from mcp.server.fastmcp import FastMCP

from jsenet.labels import DEFAULT_EDGE_RADIUS
from jsenet.sanitize import to_jsonable


def register(mcp: FastMCP):
    @mcp.tool()
    def prepare_edge_labels(
        cloud_path: str,
        output_path: str,
        radius: float = DEFAULT_EDGE_RADIUS,
        num_classes: int | None = None,
        ignore_triggers: bool = False,
    ) -> dict[str, Any]:
        """Generate semantic edge labels for a labeled PLY point cloud and write them as a SEPM file.

        A point becomes an edge point of every class present within `radius` meters
        (default 0.02) when that neighborhood holds a label different from its own.

        Args:
            cloud_path: Labeled PLY cloud (vertex property `label`, -1 = ignore)
            output_path: Destination .sepm file
            radius: Neighborhood radius in meters
            num_classes: Class count K (default: highest label + 1)
            ignore_triggers: Let ignore-labelled neighbors mark single-class edges
        """
        from jsenet import get_session

        stats = get_session().prepare_edges(cloud_path, output_path, radius, num_classes, ignore_triggers)
        return to_jsonable({"output_path": output_path, **stats})

    @mcp.tool()
    def get_edge_statistics(path: str, radius: float = DEFAULT_EDGE_RADIUS) -> dict[str, Any]:
        """Summarize edge labels: edge point counts and the non-edge fractions (beta) per class.

        Args:
            path: A .sepm file, or a labeled PLY cloud whose edges are generated at `radius`
            radius: Neighborhood radius in meters when `path` is a PLY cloud
        """
        from jsenet import get_session

        return to_jsonable(get_session().edge_statistics(path, radius))
