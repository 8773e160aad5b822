"""Edge map generation: boundary potentials as |mean filter(mask) - mask|."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jsenet import tensor as T
from jsenet.errors import ContractError, DimensionError
from jsenet.geometry import PointCloud, neighbor_groups
from jsenet.labels import OneHotMask
from jsenet.tensor import IndexGroups, Tensor


@dataclass(frozen=True)
class MeanFilterSpec:
    """Closed-ball neighbor lists, every list containing its own point."""

    radius: float
    neighbors: IndexGroups

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractError(f"mean filter radius must be positive, got {self.radius}")
        self.check_self_inclusion()

    @property
    def num_points(self) -> int:
        return self.neighbors.num_groups

    def check_self_inclusion(self) -> None:
        counts = self.neighbors.counts
        if len(counts) and counts.min() == 0:
            raise ContractError(f"point {int(np.argmin(counts))} has an empty neighbor list")
        owner = self.neighbors.group_ids()
        has_self = np.zeros(self.num_points, dtype=bool)
        has_self[owner[self.neighbors.indices == owner]] = True
        if not has_self.all():
            raise ContractError(f"point {int(np.argmin(has_self))} is missing from its own neighbor list")


def build_mean_filter(cloud: PointCloud, radius: float) -> MeanFilterSpec:
    return MeanFilterSpec(radius, neighbor_groups(cloud, radius))


def emg(mask: Tensor, spec: MeanFilterSpec) -> Tensor:
    """Differentiable boundary potentials of an (N, K) mask of probability rows."""
    if mask.data.ndim != 2 or mask.shape[0] != spec.num_points:
        raise DimensionError("emg", mask.shape, (spec.num_points,))
    return T.abs(T.sub(T.mean_over_index_groups(mask, spec.neighbors), mask))


def emg_gt(target: OneHotMask, spec: MeanFilterSpec) -> np.ndarray:
    """Boundary potentials of one-hot ground truth; ignored points are left out
    of the neighborhood means and receive zero rows."""
    values = target.values
    if values.shape[0] != spec.num_points:
        raise DimensionError("emg_gt", values.shape, (spec.num_points,))
    if not target.ignore.any():
        return np.abs(T.group_means(values, spec.neighbors) - values)

    # Labelled points keep themselves, so their reduced groups stay nonempty.
    owner = spec.neighbors.group_ids()
    keep = ~target.ignore[spec.neighbors.indices] & ~target.ignore[owner]
    rows = np.flatnonzero(~target.ignore)
    counts = np.bincount(owner[keep], minlength=spec.num_points)[rows]
    reduced = IndexGroups(
        np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        spec.neighbors.indices[keep],
    )
    out = np.zeros_like(values)
    out[rows] = np.abs(T.group_means(values, reduced) - values[rows])
    return out
