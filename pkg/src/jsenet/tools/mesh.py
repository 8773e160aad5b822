"""Mesh rasterization tools."""

from typing import Any

from mcp.server.fastmcp import FastMCP

from jsenet.sanitize import to_jsonable


def register(mcp: FastMCP):
    @mcp.tool()
    def sample_mesh_to_cloud(
        mesh_path: str,
        output_path: str,
        density: float = 2500.0,
        seed: int = 0,
    ) -> dict[str, Any]:
        """Uniformly sample points on the faces of a labeled triangle mesh (PLY).

        Each face receives round(area * density) points; a sample inherits the
        label and color of its nearest face vertex.

        Args:
            mesh_path: PLY mesh with vertex labels
            output_path: Destination PLY cloud
            density: Points per square meter
            seed: Random seed
        """
        from jsenet import get_session

        stats = get_session().sample_mesh(mesh_path, output_path, density, seed)
        return to_jsonable({"output_path": output_path, **stats})
