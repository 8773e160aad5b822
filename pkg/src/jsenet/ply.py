"""PLY reading and writing for clouds and meshes, on top of `plyfile`.

Clouds carry x,y,z (float), red,green,blue (uchar) and label (int, -1 =
ignore). Meshes add a face element whose `vertex_indices` list may hold any
polygon; polygons are split into triangle fans on reading.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from jsenet.errors import InputError
from jsenet.geometry import IGNORE_LABEL, PointCloud, TriangleMesh


def read_ply(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """All elements of a PLY file as {element: {property: array}}.

    List properties come back as object arrays with one index array per row.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"PLY file not found: '{path}'")
    try:
        ply = PlyData.read(str(path))
    except (PlyParseError, ValueError, EOFError) as exc:
        raise InputError(f"cannot read PLY file '{path}': {exc}") from None
    return {
        element.name: {name: np.array(element.data[name]) for name in element.data.dtype.names}
        for element in ply.elements
    }


def _vertex_fields(vertex: dict[str, np.ndarray], what: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    missing = [k for k in ("x", "y", "z") if k not in vertex]
    if missing:
        raise InputError(f"{what} has no {'/'.join(missing)} property")
    positions = np.stack([vertex[k].astype(np.float64) for k in ("x", "y", "z")], axis=1)
    n = len(positions)
    if all(k in vertex for k in ("red", "green", "blue")):
        colors = np.stack([vertex[k].astype(np.float64) for k in ("red", "green", "blue")], axis=1) / 255.0
    else:
        colors = np.zeros((n, 3))
    labels = vertex["label"].astype(np.int64) if "label" in vertex else np.full(n, IGNORE_LABEL, dtype=np.int64)
    return positions, colors, labels


def triangulate(polygons) -> np.ndarray:
    """Fan-triangulate index lists: [a, b, c, d] becomes [a, b, c], [a, c, d]."""
    triangles = []
    for row, polygon in enumerate(polygons):
        polygon = np.asarray(polygon, dtype=np.int64).reshape(-1)
        if len(polygon) < 3:
            raise InputError(f"face {row} has {len(polygon)} vertices; a face needs at least 3")
        for i in range(1, len(polygon) - 1):
            triangles.append((polygon[0], polygon[i], polygon[i + 1]))
    return np.array(triangles, dtype=np.int64).reshape(-1, 3)


def read_cloud(path: str | Path) -> PointCloud:
    elements = read_ply(path)
    if "vertex" not in elements:
        raise InputError(f"'{path}' has no vertex element")
    return PointCloud(*_vertex_fields(elements["vertex"], str(path)))


def read_mesh(path: str | Path) -> TriangleMesh:
    elements = read_ply(path)
    if "vertex" not in elements or "face" not in elements:
        raise InputError(f"'{path}' needs vertex and face elements")
    positions, colors, labels = _vertex_fields(elements["vertex"], str(path))
    polygons = elements["face"].get("vertex_indices")
    if polygons is None:
        raise InputError(f"'{path}' faces have no vertex_indices list")
    return TriangleMesh(positions, triangulate(polygons), labels, colors)


def _vertex_table(positions, colors, labels, extra: dict[str, np.ndarray] | None) -> np.ndarray:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "<i4")]
    extra = extra or {}
    fields += [(name, "<f4") for name in extra]
    table = np.zeros(len(positions), dtype=fields)
    for i, axis in enumerate(("x", "y", "z")):
        table[axis] = positions[:, i]
    rgb = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)
    for i, channel in enumerate(("red", "green", "blue")):
        table[channel] = rgb[:, i]
    table["label"] = labels
    for name, values in extra.items():
        table[name] = values
    return table


def _write(path: str | Path, elements: list[PlyElement], binary: bool) -> None:
    PlyData(elements, text=not binary, byte_order="<").write(str(path))


def write_cloud(
    path: str | Path,
    cloud: PointCloud,
    binary: bool = True,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write x,y,z / red,green,blue / label plus optional float properties."""
    table = _vertex_table(cloud.positions, cloud.colors, cloud.labels, extra)
    _write(path, [PlyElement.describe(table, "vertex")], binary)


def write_mesh(path: str | Path, mesh: TriangleMesh, binary: bool = True) -> None:
    table = _vertex_table(mesh.vertices, mesh.colors, mesh.labels, None)
    faces = np.zeros(len(mesh.faces), dtype=[("vertex_indices", "<i4", (3,))])
    faces["vertex_indices"] = mesh.faces
    vertex = PlyElement.describe(table, "vertex")
    face = PlyElement.describe(faces, "face", len_types={"vertex_indices": "u1"})
    _write(path, [vertex, face], binary)
