"""Synthetic toy scene: two boxes standing on a floor, three classes.

Each box stands inside one 0.64 m cell of the absolute grid, and the floor
stops just short of that cell. Every cell of the pyramid built on a 4 cm
grid (0.04 to 0.64 m) is then pure, so all segmentation side heads can fit
the scene exactly.
"""

from __future__ import annotations

import numpy as np

from jsenet.geometry import PointCloud, TriangleMesh, sample_mesh

FLOOR, BOX_A, BOX_B = 0, 1, 2
COLORS = {FLOOR: (0.5, 0.5, 0.5), BOX_A: (0.8, 0.2, 0.2), BOX_B: (0.2, 0.3, 0.8)}

CELL = 0.64
FLOOR_CELLS = (5, 3)
BOX_CELLS = {BOX_A: (1, 1), BOX_B: (3, 1)}
BOX_HEIGHT = 0.3
WALL_INSET = 0.01
FLOOR_GAP = 0.005

# Two triangles per face, vertices ordered so faces point outward.
_BOX_FACES = np.array([
    [0, 1, 2], [0, 2, 3],  # top
    [4, 5, 1], [4, 1, 0],
    [5, 6, 2], [5, 2, 1],
    [6, 7, 3], [6, 3, 2],
    [7, 4, 0], [7, 0, 3],
])


def _box(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    (x0, y0, z0), (x1, y1, z1) = low, high
    return np.array([
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
    ])


def _floor_rects(width: float, depth: float, holes: list[tuple[float, float, float, float]]) -> list[tuple]:
    """Cover [0, width] x [0, depth] minus `holes`, which all span the same y band."""
    (_, y0, _, y1) = holes[0]
    rects = [(0.0, 0.0, width, y0), (0.0, y1, width, depth)]
    x = 0.0
    for hx0, _, hx1, _ in sorted(holes):
        rects.append((x, y0, hx0, y1))
        x = hx1
    rects.append((x, y0, width, y1))
    return [r for r in rects if r[2] > r[0] and r[3] > r[1]]


def toy_mesh() -> TriangleMesh:
    """Floor of 3.2 m x 1.92 m with two open-bottom 0.62 m boxes standing in it."""
    width, depth = FLOOR_CELLS[0] * CELL, FLOOR_CELLS[1] * CELL
    vertices, faces, labels = [], [], []
    holes = []
    for label, (i, j) in BOX_CELLS.items():
        low = np.array([i * CELL + WALL_INSET, j * CELL + WALL_INSET, 0.0])
        high = np.array([(i + 1) * CELL - WALL_INSET, (j + 1) * CELL - WALL_INSET, BOX_HEIGHT])
        faces.append(_BOX_FACES + sum(len(v) for v in vertices))
        vertices.append(_box(low, high))
        labels += [label] * 8
        holes.append((i * CELL - FLOOR_GAP, j * CELL - FLOOR_GAP, (i + 1) * CELL + FLOOR_GAP, (j + 1) * CELL + FLOOR_GAP))
    for x0, y0, x1, y1 in _floor_rects(width, depth, holes):
        base = sum(len(v) for v in vertices)
        vertices.append(np.array([[x0, y0, 0.0], [x1, y0, 0.0], [x1, y1, 0.0], [x0, y1, 0.0]]))
        faces.append(np.array([[0, 1, 2], [0, 2, 3]]) + base)
        labels += [FLOOR] * 4
    colors = np.array([COLORS[label] for label in labels])
    return TriangleMesh(np.concatenate(vertices), np.concatenate(faces), np.array(labels), colors)


def toy_scene(seed: int = 0, density: float = 500.0, color_noise: float = 0.02) -> PointCloud:
    """About 3.8k points at the default density."""
    cloud = sample_mesh(toy_mesh(), density, seed)
    rng = np.random.default_rng(seed)
    colors = np.clip(cloud.colors + rng.normal(0.0, color_noise, size=cloud.colors.shape), 0.0, 1.0)
    return PointCloud(cloud.positions, colors, cloud.labels)
