"""Point-cloud containers, spatial indexing, subsampling and sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from jsenet.errors import ContractError
from jsenet.tensor import IndexGroups

logger = logging.getLogger(__name__)

IGNORE_LABEL = -1


@dataclass
class PointCloud:
    """N points: positions in meters, colors in [0, 1], labels (-1 = ignore)."""

    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = (
            np.zeros((n, 3)) if self.colors is None else np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        )
        self.labels = (
            np.full(n, IGNORE_LABEL, dtype=np.int64) if self.labels is None
            else np.asarray(self.labels, dtype=np.int64).reshape(-1)
        )
        if self.source_indices is not None:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        lengths = {len(self.colors), len(self.labels), n}
        if self.source_indices is not None:
            lengths.add(len(self.source_indices))
        if len(lengths) != 1:
            raise ContractError(f"point cloud arrays disagree on length: {sorted(lengths)}")
        if not np.isfinite(self.positions).all():
            raise ContractError("point positions must be finite")
        if n and self.labels.min() < IGNORE_LABEL:
            raise ContractError(f"invalid label {self.labels.min()} (use -1 for ignore)")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), source_indices=np.zeros(0, dtype=np.int64))

    @property
    def is_labeled(self) -> bool:
        return bool((self.labels >= 0).any())

    def subset(self, rows: np.ndarray) -> "PointCloud":
        """Rows of this cloud; source_indices keep pointing at the original cloud."""
        rows = np.asarray(rows, dtype=np.int64)
        source = self.source_indices[rows] if self.source_indices is not None else rows
        return PointCloud(self.positions[rows], self.colors[rows], self.labels[rows], source)


# --- Spatial index ---

def _cell_coords(positions: np.ndarray, cell: float) -> np.ndarray:
    return np.floor(positions / cell).astype(np.int64)


class SpatialIndex:
    """Uniform-grid hash over positions; immutable once built."""

    def __init__(self, positions: np.ndarray, cell: float):
        if cell <= 0:
            raise ContractError(f"spatial index cell must be positive, got {cell}")
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.positions.flags.writeable = False
        self.cell = float(cell)
        coords = _cell_coords(self.positions, self.cell)
        if len(coords):
            self._origin = coords.min(axis=0)
            self._dims = coords.max(axis=0) - self._origin + 1
        else:
            self._origin = np.zeros(3, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
        keys = self._encode(coords - self._origin)
        self._order = np.argsort(keys, kind="stable")
        self._keys, self._starts, counts = np.unique(keys[self._order], return_index=True, return_counts=True)
        self._ends = self._starts + counts

    def __len__(self) -> int:
        return len(self.positions)

    def _encode(self, local: np.ndarray) -> np.ndarray:
        return (local[:, 0] * self._dims[1] + local[:, 1]) * self._dims[2] + local[:, 2]

    def query_many(self, queries: np.ndarray, radius: float) -> IndexGroups:
        """For each query, ids of points with ||p - q|| <= radius, ascending."""
        if radius <= 0:
            raise ContractError(f"query radius must be positive, got {radius}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        num_queries = len(queries)
        if num_queries == 0 or len(self.positions) == 0:
            return IndexGroups(np.zeros(num_queries + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

        ring = int(np.ceil(radius / self.cell))
        local = _cell_coords(queries, self.cell) - self._origin
        steps = np.arange(-ring, ring + 1)
        shifts = np.stack(np.meshgrid(steps, steps, steps, indexing="ij"), axis=-1).reshape(-1, 3)

        query_parts, point_parts = [], []
        for shift in shifts:
            cells = local + shift
            inside = np.all((cells >= 0) & (cells < self._dims), axis=1)
            rows = np.flatnonzero(inside)
            if not len(rows):
                continue
            keys = self._encode(cells[rows])
            slot = np.searchsorted(self._keys, keys)
            slot = np.minimum(slot, len(self._keys) - 1)
            hit = self._keys[slot] == keys
            rows, slot = rows[hit], slot[hit]
            counts = self._ends[slot] - self._starts[slot]
            total = int(counts.sum())
            if total == 0:
                continue
            within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            query_parts.append(np.repeat(rows, counts))
            point_parts.append(self._order[np.repeat(self._starts[slot], counts) + within])

        if not query_parts:
            return IndexGroups(np.zeros(num_queries + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
        query_ids = np.concatenate(query_parts)
        point_ids = np.concatenate(point_parts)
        d2 = np.sum((self.positions[point_ids] - queries[query_ids]) ** 2, axis=1)
        keep = d2 <= radius * radius
        query_ids, point_ids = query_ids[keep], point_ids[keep]
        order = np.lexsort((point_ids, query_ids))
        query_ids, point_ids = query_ids[order], point_ids[order]
        counts = np.bincount(query_ids, minlength=num_queries)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return IndexGroups(offsets, point_ids.astype(np.int64))


def build_index(cloud: PointCloud, radius: float) -> SpatialIndex:
    """Index with cell edge equal to the query radius."""
    return SpatialIndex(cloud.positions, radius)


def radius_neighbors(index: SpatialIndex, query: np.ndarray, r: float) -> np.ndarray:
    """Ids of all indexed points within the closed ball of radius r, ascending."""
    groups = index.query_many(np.asarray(query, dtype=np.float64).reshape(1, 3), r)
    return groups.group(0)


def neighbor_groups(cloud: PointCloud, radius: float, queries: PointCloud | None = None) -> IndexGroups:
    """Closed-ball neighbor lists of `queries` (default: the cloud itself) among cloud points."""
    index = build_index(cloud, radius)
    target = cloud if queries is None else queries
    return index.query_many(target.positions, radius)


def pad_groups(groups: IndexGroups, fill: int) -> np.ndarray:
    """Dense (M, H) view of variable-length groups, short rows padded with `fill`."""
    counts = groups.counts
    width = max(int(counts.max()) if len(counts) else 0, 1)
    dense = np.full((groups.num_groups, width), fill, dtype=np.int64)
    rows = groups.group_ids()
    cols = np.arange(len(groups.indices)) - np.repeat(groups.offsets[:-1], counts)
    dense[rows, cols] = groups.indices
    return dense


# --- Subsampling ---

@dataclass
class Subsampled:
    """Grid-subsampled cloud plus, for every input point, the row of its cell."""

    cloud: PointCloud
    assignment: np.ndarray

    def members(self) -> IndexGroups:
        order = np.argsort(self.assignment, kind="stable")
        counts = np.bincount(self.assignment, minlength=len(self.cloud))
        return IndexGroups(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64), order.astype(np.int64))


def majority_labels(labels: np.ndarray, assignment: np.ndarray, num_cells: int) -> np.ndarray:
    """Most frequent valid label per cell, lowest class id on ties, -1 if none."""
    valid = labels >= 0
    if not valid.any():
        return np.full(num_cells, IGNORE_LABEL, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    votes = np.zeros((num_cells, num_classes), dtype=np.int64)
    np.add.at(votes, (assignment[valid], labels[valid]), 1)
    winners = votes.argmax(axis=1)
    winners[votes.sum(axis=1) == 0] = IGNORE_LABEL
    return winners.astype(np.int64)


def grid_subsample(cloud: PointCloud, cell: float) -> Subsampled:
    """One point per nonempty cell at the barycenter of its members."""
    if cell <= 0:
        raise ContractError(f"grid cell must be positive, got {cell}")
    if len(cloud) == 0:
        return Subsampled(PointCloud.empty(), np.zeros(0, dtype=np.int64))
    coords = _cell_coords(cloud.positions, cell)
    origin = coords.min(axis=0)
    dims = coords.max(axis=0) - origin + 1
    local = coords - origin
    keys = (local[:, 0] * dims[1] + local[:, 1]) * dims[2] + local[:, 2]
    _, assignment = np.unique(keys, return_inverse=True)
    assignment = assignment.reshape(-1).astype(np.int64)
    num_cells = int(assignment.max()) + 1
    counts = np.bincount(assignment, minlength=num_cells).astype(np.float64)
    positions = np.stack(
        [np.bincount(assignment, weights=cloud.positions[:, d], minlength=num_cells) for d in range(3)], axis=1
    ) / counts[:, None]
    colors = np.stack(
        [np.bincount(assignment, weights=cloud.colors[:, d], minlength=num_cells) for d in range(3)], axis=1
    ) / counts[:, None]
    labels = majority_labels(cloud.labels, assignment, num_cells)
    return Subsampled(PointCloud(positions, colors, labels), assignment)


# --- Spheres ---

def sample_sphere(cloud: PointCloud, center: np.ndarray, r: float) -> PointCloud:
    """Sub-cloud inside the closed ball; source_indices refer to `cloud`'s origin."""
    if r <= 0:
        raise ContractError(f"sphere radius must be positive, got {r}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    inside = np.sum((cloud.positions - center) ** 2, axis=1) <= r * r
    return cloud.subset(np.flatnonzero(inside))


# --- Meshes ---

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        v = len(self.vertices)
        if self.labels is None:
            self.labels = np.full(v, IGNORE_LABEL, dtype=np.int64)
        if self.colors is None:
            self.colors = np.zeros((v, 3))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ContractError(f"face index out of range for {v} vertices")
        if len(self.labels) != v or len(self.colors) != v:
            raise ContractError("per-vertex labels and colors must match the vertex count")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def mesh_samples(mesh: TriangleMesh, density: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Face ids and barycentric weights (S, 3) of uniform samples, round(area * density) per face."""
    if density <= 0:
        raise ContractError(f"sampling density must be positive, got {density}")
    per_face = np.rint(mesh.face_areas() * density).astype(np.int64)
    face_ids = np.repeat(np.arange(len(mesh.faces)), per_face)
    rng = np.random.default_rng(seed)
    u = rng.random(len(face_ids))
    v = rng.random(len(face_ids))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    weights = np.stack([1.0 - u - v, u, v], axis=1)
    return face_ids, weights


def sample_mesh(mesh: TriangleMesh, density: float, seed: int = 0) -> PointCloud:
    """Rasterize a mesh; samples take label and color of their nearest vertex."""
    face_ids, weights = mesh_samples(mesh, density, seed)
    if len(face_ids) == 0:
        logger.warning("Mesh has zero sampled area at density %s", density)
        return PointCloud.empty()
    corners = mesh.faces[face_ids]
    positions = np.einsum("sk,skd->sd", weights, mesh.vertices[corners])
    nearest = corners[np.arange(len(corners)), weights.argmax(axis=1)]
    return PointCloud(positions, mesh.colors[nearest], mesh.labels[nearest])


# --- Augmentation ---

@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0

    @classmethod
    def draw(cls, rng: np.random.Generator, scale_range: float = 0.1, noise_sigma: float = 0.001) -> "AugmentParams":
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        scale = tuple(float(s) for s in rng.uniform(1.0 - scale_range, 1.0 + scale_range, size=3))
        return cls(angle, scale, noise_sigma)

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_augmentation(cloud: PointCloud, params: AugmentParams, rng: np.random.Generator | None = None) -> PointCloud:
    """Rotate about z, scale per axis, then add Gaussian noise; colors and labels untouched."""
    positions = cloud.positions @ params.rotation().T * np.asarray(params.scale)
    if params.noise_sigma > 0:
        if rng is None:
            raise ContractError("positional noise needs a random generator")
        positions = positions + rng.normal(0.0, params.noise_sigma, size=positions.shape)
    return PointCloud(positions, cloud.colors.copy(), cloud.labels.copy(), cloud.source_indices)


def augment(cloud: PointCloud, rng_seed: int) -> PointCloud:
    rng = np.random.default_rng(rng_seed)
    return apply_augmentation(cloud, AugmentParams.draw(rng), rng)


# --- Label projection ---

def nearest_rows(source: np.ndarray, targets: np.ndarray, cell: float = 0.1, chunk: int = 2048) -> np.ndarray:
    """For every target, the row of its nearest source point (lowest row on ties)."""
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(source) == 0:
        raise ContractError("cannot project from an empty cloud")
    nearest = np.full(len(targets), -1, dtype=np.int64)

    groups = SpatialIndex(source, cell).query_many(targets, cell)
    if len(groups.indices):
        owner = groups.group_ids()
        d2 = np.sum((source[groups.indices] - targets[owner]) ** 2, axis=1)
        order = np.lexsort((groups.indices, d2, owner))
        owner_sorted = owner[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = owner_sorted[1:] != owner_sorted[:-1]
        nearest[owner_sorted[first]] = groups.indices[order[first]]

    # Targets with nothing within one cell: exhaustive scan.
    missing = np.flatnonzero(nearest < 0)
    for start in range(0, len(missing), chunk):
        rows = missing[start:start + chunk]
        d2 = np.sum((targets[rows, None, :] - source[None, :, :]) ** 2, axis=2)
        nearest[rows] = d2.argmin(axis=1)
    return nearest


def project_nearest(source: PointCloud, target: PointCloud, values: np.ndarray) -> np.ndarray:
    """Each target point receives the value of its nearest source point."""
    values = np.asarray(values)
    if len(values) != len(source):
        raise ContractError(f"{len(values)} values for {len(source)} source points")
    return values[nearest_rows(source.positions, target.positions)]
