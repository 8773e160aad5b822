"""Rigid kernel point convolution and the encoder blocks shared by both streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from jsenet import tensor as T
from jsenet.errors import ContractError
from jsenet.geometry import PointCloud, grid_subsample, neighbor_groups, pad_groups
from jsenet.layers import BatchNorm, Module, Unary, kaiming_uniform
from jsenet.tensor import IndexGroups, Tensor

logger = logging.getLogger(__name__)

SHELL_RADIUS = 0.66
SHELL_POINTS = 14


def kernel_points(
    num_shell: int = SHELL_POINTS,
    shell: float = SHELL_RADIUS,
    seed: int = 0,
    steps: int = 2000,
    step_size: float = 0.01,
) -> np.ndarray:
    """Unit-ball kernel: a fixed center point plus `num_shell` points spread on a shell.

    The shell points start at seeded random directions and descend the
    repulsive energy sum(1 / d) over all pairs, projected back onto the
    sphere after every step. The same seed always gives the same layout.
    """
    if num_shell < 2:
        raise ContractError(f"a kernel shell needs at least 2 points, got {num_shell}")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_shell, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    for step in range(steps):
        diff = directions[:, None, :] - directions[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        force = np.sum(diff / dist[..., None] ** 3, axis=1)
        force -= np.sum(force * directions, axis=1, keepdims=True) * directions
        move = step_size * (1.0 - step / steps) * force
        # Close random starts produce huge forces; cap the first moves.
        norms = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, 0.1 / np.maximum(norms, 1e-12))
        directions += move
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return np.concatenate([np.zeros((1, 3)), shell * directions])


KERNEL_POINTS = kernel_points()


@dataclass(frozen=True)
class KernelLayout:
    points: np.ndarray = field(default_factory=lambda: KERNEL_POINTS.copy())
    sigma_factor: float = 0.3

    @property
    def size(self) -> int:
        return len(self.points)

    def scaled(self, radius: float) -> tuple[np.ndarray, float]:
        """Kernel point positions and influence distance for a layer radius."""
        return self.points * radius, self.sigma_factor * radius


DEFAULT_LAYOUT = KernelLayout()


def kernel_influence(
    query: np.ndarray,
    support: np.ndarray,
    neighbors: np.ndarray,
    radius: float,
    layout: KernelLayout = DEFAULT_LAYOUT,
) -> np.ndarray:
    """Linear influences h = max(0, 1 - d / sigma), shape (M, H, Kp).

    `neighbors` is padded with len(support); padded slots get zero influence.
    """
    kernel, sigma = layout.scaled(radius)
    shadow = np.full((1, 3), 1e6)
    padded = np.concatenate([support, shadow], axis=0)
    offsets = padded[neighbors] - query[:, None, :]
    distances = np.linalg.norm(offsets[:, :, None, :] - kernel[None, None, :, :], axis=-1)
    influence = np.maximum(0.0, 1.0 - distances / sigma)
    influence[neighbors == len(support)] = 0.0
    return influence


@dataclass
class ConvGeometry:
    """Padded neighbor rows and kernel influences of one convolution site."""

    neighbors: np.ndarray
    influence: np.ndarray
    empty_rows: int


def conv_geometry(
    query: np.ndarray,
    support: np.ndarray,
    groups: IndexGroups,
    radius: float,
    layout: KernelLayout = DEFAULT_LAYOUT,
) -> ConvGeometry:
    neighbors = pad_groups(groups, len(support))
    influence = kernel_influence(query, support, neighbors, radius, layout)
    return ConvGeometry(neighbors, influence, int(np.count_nonzero(groups.counts == 0)))


class KPConv(Module):
    """F'(p) = sum over neighbors q and kernel points i of h(q - p, x_i) * f(q) W_i."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int, layout: KernelLayout = DEFAULT_LAYOUT):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.layout = layout
        self.weights = self.add_param(
            "weights", kaiming_uniform(rng, (layout.size, in_channels, out_channels), layout.size * in_channels)
        )

    def __call__(self, features: Tensor, geometry: ConvGeometry) -> Tensor:
        if geometry.empty_rows:
            logger.debug("KPConv: %d query points without neighbors produce zero rows", geometry.empty_rows)
        return T.point_conv(features, geometry.neighbors, geometry.influence, self.weights)


# --- Pyramid ---

@dataclass
class Pyramid:
    """Per-stage clouds and the neighborhood structures linking them."""

    clouds: list[PointCloud]
    cells: list[float]
    radii: list[float]
    neighbors: list[IndexGroups]
    pools: list[IndexGroups]
    members: list[IndexGroups]
    upsamples: list[np.ndarray]
    layout: KernelLayout = DEFAULT_LAYOUT
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_stages(self) -> int:
        return len(self.clouds)

    def conv(self, stage: int) -> ConvGeometry:
        """Convolution within a stage at its radius."""
        key = ("conv", stage)
        if key not in self._cache:
            pos = self.clouds[stage].positions
            self._cache[key] = conv_geometry(pos, pos, self.neighbors[stage], self.radii[stage], self.layout)
        return self._cache[key]

    def strided(self, stage: int) -> ConvGeometry:
        """Convolution from stage - 1 into the subsampled points of `stage`."""
        key = ("strided", stage)
        if key not in self._cache:
            self._cache[key] = conv_geometry(
                self.clouds[stage].positions,
                self.clouds[stage - 1].positions,
                self.pools[stage - 1],
                self.radii[stage - 1],
                self.layout,
            )
        return self._cache[key]

    def to_full(self, stage: int) -> np.ndarray:
        """Row of the stage-`stage` ancestor of every stage-0 point."""
        mapping = np.arange(len(self.clouds[0]))
        for s in range(stage):
            mapping = self.upsamples[s][mapping]
        return mapping


def build_pyramid(
    cloud: PointCloud,
    base_cell: float = 0.04,
    num_stages: int = 5,
    radius_factor: float = 2.5,
    layout: KernelLayout = DEFAULT_LAYOUT,
) -> Pyramid:
    """Stage cells base_cell * 2^i; stage 0 is the given (already subsampled) cloud."""
    if len(cloud) == 0:
        raise ContractError("cannot build a pyramid on an empty cloud")
    clouds, cells, members, upsamples = [cloud], [base_cell], [], []
    for stage in range(1, num_stages):
        cell = base_cell * 2**stage
        sub = grid_subsample(clouds[-1], cell)
        if len(sub.cloud) < 1:
            raise ContractError(f"stage {stage} has no points; the sphere is too sparse")
        clouds.append(sub.cloud)
        cells.append(cell)
        members.append(sub.members())
        upsamples.append(sub.assignment)
    radii = [radius_factor * c for c in cells]
    neighbors = [neighbor_groups(c, r) for c, r in zip(clouds, radii)]
    pools = [neighbor_groups(clouds[s], radii[s], queries=clouds[s + 1]) for s in range(num_stages - 1)]
    return Pyramid(clouds, cells, radii, neighbors, pools, members, upsamples, layout)


def nearest_upsample(coarse: Tensor, fine_to_coarse: np.ndarray) -> Tensor:
    """Every fine point copies the features of its coarse parent."""
    fine_to_coarse = np.asarray(fine_to_coarse, dtype=np.int64)
    if fine_to_coarse.size and (fine_to_coarse.min() < 0 or fine_to_coarse.max() >= coarse.shape[0]):
        raise ContractError("fine point without a valid coarse parent")
    return T.gather_rows(coarse, fine_to_coarse)


# --- Blocks ---

class SimpleBlock(Module):
    def __init__(
        self,
        rng,
        in_channels: int,
        out_channels: int,
        layout: KernelLayout = DEFAULT_LAYOUT,
        bn_decay: float = T.BN_DECAY,
    ):
        super().__init__()
        self.conv = self.add_child("conv", KPConv(rng, in_channels, out_channels, layout))
        self.norm = self.add_child("norm", BatchNorm(out_channels, bn_decay))

    def __call__(self, features: Tensor, geometry: ConvGeometry) -> Tensor:
        return T.leaky_relu(self.norm(self.conv(features, geometry)))


class ResnetBlock(Module):
    """Bottleneck residual block; strided blocks pool the shortcut over cell members."""

    def __init__(
        self,
        rng,
        in_channels: int,
        out_channels: int,
        strided: bool = False,
        layout: KernelLayout = DEFAULT_LAYOUT,
        bn_decay: float = T.BN_DECAY,
    ):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.strided = strided
        self.reduce = self.add_child("reduce", Unary(rng, in_channels, mid, bn_decay=bn_decay))
        self.conv = self.add_child("conv", SimpleBlock(rng, mid, mid, layout, bn_decay))
        self.expand = self.add_child("expand", Unary(rng, mid, out_channels, activation=False, bn_decay=bn_decay))
        if in_channels != out_channels:
            self.shortcut = self.add_child(
                "shortcut", Unary(rng, in_channels, out_channels, activation=False, bn_decay=bn_decay)
            )
        else:
            self.shortcut = None

    def __call__(self, features: Tensor, geometry: ConvGeometry, members: IndexGroups | None = None) -> Tensor:
        x = self.expand(self.conv(self.reduce(features), geometry))
        skip = features
        if self.strided:
            if members is None:
                raise ContractError("strided block needs subsampling members")
            skip = T.mean_over_index_groups(skip, members)
        if self.shortcut is not None:
            skip = self.shortcut(skip)
        return T.leaky_relu(T.add(x, skip))


class KPEncoder(Module):
    """Stage 0 lifts the input features; later stages open with a strided block."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        widths: list[int],
        blocks_per_stage: int = 2,
        layout: KernelLayout = DEFAULT_LAYOUT,
        bn_decay: float = T.BN_DECAY,
    ):
        super().__init__()
        self.widths = list(widths)
        self.blocks_per_stage = blocks_per_stage
        self.stem = self.add_child("stem", SimpleBlock(rng, in_channels, widths[0], layout, bn_decay))
        self.stages: list[list[ResnetBlock]] = []
        for stage, width in enumerate(widths):
            blocks = []
            for b in range(blocks_per_stage):
                strided = stage > 0 and b == 0
                in_width = widths[stage - 1] if strided else width
                blocks.append(self.add_child(
                    f"stage{stage}/block{b}", ResnetBlock(rng, in_width, width, strided, layout, bn_decay)
                ))
            self.stages.append(blocks)

    def __call__(self, pyramid: Pyramid, features: Tensor) -> list[Tensor]:
        if pyramid.num_stages != len(self.widths):
            raise ContractError(f"encoder has {len(self.widths)} stages, pyramid has {pyramid.num_stages}")
        x = self.stem(features, pyramid.conv(0))
        outputs = []
        for stage, blocks in enumerate(self.stages):
            for block in blocks:
                if block.strided:
                    x = block(x, pyramid.strided(stage), pyramid.members[stage - 1])
                else:
                    x = block(x, pyramid.conv(stage))
            outputs.append(x)
        return outputs


@dataclass
class EncodedPyramid:
    pyramid: Pyramid
    features: list[Tensor]


def build_encoder(
    encoder: KPEncoder,
    cloud: PointCloud,
    features: Tensor,
    base_cell: float = 0.04,
    radius_factor: float = 2.5,
) -> EncodedPyramid:
    """Pyramid over a grid-subsampled cloud plus the encoder features of every stage."""
    pyramid = build_pyramid(cloud, base_cell, len(encoder.widths), radius_factor, encoder.stem.conv.layout)
    return EncodedPyramid(pyramid, encoder(pyramid, features))
