"""Ground truth for both tasks: semantic edge bitmasks, binary edges, one-hot masks."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from jsenet.errors import ContractError, InputError
from jsenet.geometry import PointCloud, neighbor_groups

logger = logging.getLogger(__name__)

MAX_CLASSES = 64
DEFAULT_EDGE_RADIUS = 0.02
SEPM_MAGIC = b"SEPM"
SEPM_VERSION = 1


def class_bits(labels: np.ndarray) -> np.ndarray:
    """Bit `label` for valid labels, 0 for ignored points."""
    labels = np.asarray(labels, dtype=np.int64)
    bits = np.zeros(len(labels), dtype=np.uint64)
    valid = labels >= 0
    bits[valid] = np.left_shift(np.uint64(1), labels[valid].astype(np.uint64))
    return bits


@dataclass
class SemanticEdgeLabels:
    """Per-point bitmask: bit k set when the point lies on an edge of class k."""

    bits: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint64).reshape(-1)
        if not 0 < self.num_classes <= MAX_CLASSES:
            raise ContractError(f"class count must be in 1..{MAX_CLASSES}, got {self.num_classes}")
        if self.num_classes < MAX_CLASSES and len(self.bits):
            if (self.bits >> np.uint64(self.num_classes)).any():
                raise ContractError(f"edge bitmask uses classes beyond K={self.num_classes}")

    def __len__(self) -> int:
        return len(self.bits)

    def class_map(self) -> np.ndarray:
        """(N, K) 0/1 matrix, column k = edge points of class k."""
        shifts = np.arange(self.num_classes, dtype=np.uint64)
        return ((self.bits[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.float64)

    def permuted(self, order: np.ndarray) -> "SemanticEdgeLabels":
        return SemanticEdgeLabels(self.bits[order], self.num_classes)


def generate_edge_labels(
    cloud: PointCloud,
    r: float = DEFAULT_EDGE_RADIUS,
    num_classes: int | None = None,
    ignore_triggers: bool = False,
) -> SemanticEdgeLabels:
    """Mark a point as an edge of every class present in its r-neighborhood
    when that neighborhood holds a valid label different from its own.

    With `ignore_triggers`, an ignore-labelled neighbor also makes a labelled
    point an edge point (single-class edges against unconsidered classes).
    """
    if r <= 0:
        raise ContractError(f"edge radius must be positive, got {r}")
    k = num_classes if num_classes is not None else max(int(cloud.labels.max(initial=-1)) + 1, 1)
    if len(cloud) and cloud.labels.max() >= k:
        raise ContractError(f"label {cloud.labels.max()} out of range for K={k}")
    if not cloud.is_labeled:
        if len(cloud):
            logger.warning("Cloud has no valid labels; edge labels are all zero")
        return SemanticEdgeLabels(np.zeros(len(cloud), dtype=np.uint64), k)

    groups = neighbor_groups(cloud, r)
    own = class_bits(cloud.labels)
    present = np.bitwise_or.reduceat(own[groups.indices], groups.offsets[:-1])
    is_edge = (present & ~own) != 0
    if ignore_triggers:
        ignored = (cloud.labels < 0).astype(np.int64)
        has_ignored = np.add.reduceat(ignored[groups.indices], groups.offsets[:-1]) > 0
        is_edge |= has_ignored & (cloud.labels >= 0)
    return SemanticEdgeLabels(np.where(is_edge, present, np.uint64(0)), k)


def transfer_to_subsampled(labels: SemanticEdgeLabels, assignment: np.ndarray, num_cells: int) -> SemanticEdgeLabels:
    """Bitwise OR of member bitmasks per subsampling cell."""
    merged = np.zeros(num_cells, dtype=np.uint64)
    np.bitwise_or.at(merged, np.asarray(assignment, dtype=np.int64), labels.bits)
    return SemanticEdgeLabels(merged, labels.num_classes)


def to_binary_edges(labels: SemanticEdgeLabels) -> np.ndarray:
    return (labels.bits != 0).astype(np.float64)


@dataclass
class OneHotMask:
    values: np.ndarray
    ignore: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


def one_hot(labels: np.ndarray, num_classes: int) -> OneHotMask:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) and (labels.max() >= num_classes or labels.min() < -1):
        raise ContractError(f"labels must lie in -1..{num_classes - 1}")
    ignore = labels < 0
    values = np.zeros((len(labels), num_classes))
    rows = np.flatnonzero(~ignore)
    values[rows, labels[rows]] = 1.0
    return OneHotMask(values, ignore)


def skew_weights(labels: SemanticEdgeLabels) -> tuple[np.ndarray, float]:
    """Fractions of non-edge points per class (beta_k) and overall (beta)."""
    n = len(labels)
    if n == 0:
        raise ContractError("skew weights need at least one point")
    per_class = 1.0 - labels.class_map().sum(axis=0) / n
    overall = float(np.count_nonzero(labels.bits == 0)) / n
    return per_class, overall


# --- SEPM files ---

def write_sepm(path: str | Path, labels: SemanticEdgeLabels) -> None:
    with Path(path).open("wb") as stream:
        stream.write(SEPM_MAGIC)
        stream.write(struct.pack("<IQH", SEPM_VERSION, len(labels), labels.num_classes))
        stream.write(labels.bits.astype("<u8").tobytes())


def read_sepm(path: str | Path) -> SemanticEdgeLabels:
    path = Path(path)
    if not path.exists():
        raise InputError(f"edge label file not found: '{path}'")
    raw = path.read_bytes()
    header = struct.calcsize("<IQH")
    if raw[:4] != SEPM_MAGIC or len(raw) < 4 + header:
        raise InputError(f"'{path}' is not an SEPM file")
    version, n, k = struct.unpack("<IQH", raw[4:4 + header])
    if version != SEPM_VERSION:
        raise InputError(f"unsupported SEPM version {version}")
    body = raw[4 + header:]
    if len(body) != 8 * n:
        raise InputError(f"'{path}' holds {len(body) // 8} masks, header says {n}")
    return SemanticEdgeLabels(np.frombuffer(body, dtype="<u8").astype(np.uint64), k)
