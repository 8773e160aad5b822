"""Two-stream network with joint refinement.

Parameter partition: `theta/` holds the shared encoder and the segmentation
decoder, `phi/` the edge stream, `gamma/` the joint refinement module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from jsenet import tensor as T
from jsenet.config import TrainConfig
from jsenet.edgegen import MeanFilterSpec, build_mean_filter, emg
from jsenet.errors import ContractError
from jsenet.geometry import PointCloud
from jsenet.kpconv import DEFAULT_LAYOUT, KernelLayout, KPEncoder, Pyramid, SimpleBlock, build_pyramid, nearest_upsample
from jsenet.layers import Module, Unary
from jsenet.tensor import Tensor

logger = logging.getLogger(__name__)

PARTITIONS = ("theta", "phi", "gamma")
INPUT_CHANNELS = 5


def input_features(cloud: PointCloud) -> Tensor:
    """Constant 1, RGB, and height above the lowest point of the sphere."""
    z = cloud.positions[:, 2:3]
    height = z - z.min() if len(z) else z
    return Tensor(np.concatenate([np.ones((len(cloud), 1)), cloud.colors, height], axis=1))


@dataclass
class SphereInput:
    cloud: PointCloud
    pyramid: Pyramid
    mean_filter: MeanFilterSpec
    features: Tensor


@dataclass
class JSENetOutputs:
    ssp_unrefined: Tensor
    sep_unrefined: Tensor
    ssp_refined: Tensor
    sep_refined: Tensor
    binary_heads: list[Tensor] = field(default_factory=list)
    ssp_heads: list[Tensor] = field(default_factory=list)
    act_input: Tensor | None = None
    act_refined: Tensor | None = None

    def probabilities(self) -> np.ndarray:
        """Refined segmentation probabilities (N, K)."""
        with T.no_grad():
            return T.softmax_rows(self.ssp_refined).data

    def edge_maps(self) -> np.ndarray:
        """Refined semantic edge values (N, K) in [0, 1]."""
        return self.sep_refined.data


class SSStream(Module):
    """Shared encoder plus the encoder-decoder segmentation branch."""

    def __init__(self, rng: np.random.Generator, config: TrainConfig, layout: KernelLayout = DEFAULT_LAYOUT):
        super().__init__()
        widths = config.stage_widths
        decay = config.bn_momentum
        self.encoder = self.add_child(
            "encoder", KPEncoder(rng, INPUT_CHANNELS, widths, config.blocks_per_stage, layout, decay)
        )
        self.decoder = [
            self.add_child(f"decoder{i}", Unary(rng, widths[i + 1] + widths[i], widths[i], bn_decay=decay))
            for i in range(len(widths) - 1)
        ]
        self.head = self.add_child("head", Unary(rng, widths[0], widths[0], bn_decay=decay))
        self.classifier = self.add_child(
            "classifier", Unary(rng, widths[0], config.num_classes, norm=False, activation=False)
        )

    def decode_features(self, pyramid: Pyramid, stage_features: list[Tensor]) -> Tensor:
        """Full-resolution decoder features, before the classifier."""
        x = stage_features[-1]
        for i in reversed(range(len(self.decoder))):
            x = nearest_upsample(x, pyramid.upsamples[i])
            x = self.decoder[i](T.concat([x, stage_features[i]], axis=1))
        return self.head(x)


class SEDStream(Module):
    """Skip-layer edge branch: per-stage reductions, side heads, fused multi-label head.

    Without enhanced features the multi-label head reads the segmentation
    decoder's full-resolution features instead of the reduced encoder stages;
    stages keep a reduction only to feed their side head.
    """

    def __init__(self, rng: np.random.Generator, config: TrainConfig):
        super().__init__()
        k = config.num_classes
        decay = config.bn_momentum
        self.side_kinds = config.side_kinds
        self.enhanced = config.enhanced_features
        self.reductions: dict[int, Unary] = {
            i: self.add_child(f"reduce{i}", Unary(rng, width, config.side_width, bn_decay=decay))
            for i, width in enumerate(config.stage_widths)
            if self.enhanced or self.side_kinds[i] is not None
        }
        self.heads: list[Unary | None] = []
        for i, kind in enumerate(self.side_kinds):
            if kind is None:
                self.heads.append(None)
                continue
            out = 1 if kind == "bce" else k
            self.heads.append(self.add_child(f"side{i}", Unary(rng, config.side_width, out, norm=False, activation=False)))
        fuse_in = config.side_width * config.num_stages if self.enhanced else config.stage_widths[0]
        self.fuse = self.add_child("fuse", Unary(rng, fuse_in, k, norm=False, activation=False))

    def __call__(
        self,
        pyramid: Pyramid,
        stage_features: list[Tensor],
        decoded: Tensor | None = None,
    ) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        reduced, binary_heads, ssp_heads = [], [], []
        for stage, features in enumerate(stage_features):
            if stage not in self.reductions:
                continue
            local = self.reductions[stage](features)
            if stage > 0:
                local = nearest_upsample(local, pyramid.to_full(stage))
            reduced.append(local)
            head = self.heads[stage]
            if head is None:
                continue
            (binary_heads if self.side_kinds[stage] == "bce" else ssp_heads).append(head(local))
        if self.enhanced:
            return self.fuse(T.concat(reduced, axis=1)), binary_heads, ssp_heads
        if decoded is None:
            raise ContractError("the edge stream without enhanced features needs the decoder features")
        return self.fuse(decoded), binary_heads, ssp_heads


class FusionSubmodule(Module):
    """U-Net style KPConv fusion over the five-stage pyramid, mirrored decoder with skips.

    The five encoding layers share one width. The first convolves the input
    at stage 0 without striding; each of the other four halves the
    resolution into the next stage, so the deepest layer sits on the coarsest
    stage and no layer runs below the pyramid.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        width: int = 32,
        depth: int = 5,
        layout: KernelLayout = DEFAULT_LAYOUT,
        bn_decay: float = T.BN_DECAY,
    ):
        super().__init__()
        self.depth = depth
        self.encoders = [
            self.add_child(f"enc{i}", SimpleBlock(rng, in_channels if i == 0 else width, width, layout, bn_decay))
            for i in range(depth)
        ]
        self.decoders = [
            self.add_child(f"dec{i}", Unary(rng, 2 * width, width, bn_decay=bn_decay)) for i in range(depth - 1)
        ]
        self.head = self.add_child("head", Unary(rng, width, out_channels, norm=False, activation=False))

    def __call__(self, pyramid: Pyramid, x: Tensor) -> Tensor:
        if pyramid.num_stages < self.depth:
            raise ContractError(f"fusion needs {self.depth} stages, pyramid has {pyramid.num_stages}")
        skips = []
        for i, encoder in enumerate(self.encoders):
            x = encoder(x, pyramid.conv(0) if i == 0 else pyramid.strided(i))
            skips.append(x)
        for i in reversed(range(self.depth - 1)):
            x = nearest_upsample(x, pyramid.upsamples[i])
            x = self.decoders[i](T.concat([x, skips[i]], axis=1))
        return self.head(x)


class JointRefinement(Module):
    def __init__(self, rng: np.random.Generator, config: TrainConfig, layout: KernelLayout = DEFAULT_LAYOUT):
        super().__init__()
        k = config.num_classes
        args = (config.fusion_width, config.num_stages, layout, config.bn_momentum)
        self.segmentation = self.add_child("segmentation", FusionSubmodule(rng, 2 * k, k, *args))
        self.edges = self.add_child("edges", FusionSubmodule(rng, 2 * k, k, *args))

    def __call__(
        self,
        pyramid: Pyramid,
        mean_filter: MeanFilterSpec,
        ssp_unrefined: Tensor,
        sep_unrefined: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        probs = T.softmax_rows(ssp_unrefined)
        edges = T.sigmoid(sep_unrefined)
        ssp_refined = self.segmentation(pyramid, T.concat([probs, edges], axis=1))
        act_input = emg(probs, mean_filter)
        act_refined = emg(T.softmax_rows(ssp_refined), mean_filter)
        adjust = self.edges(pyramid, T.concat([edges, act_input], axis=1))
        sep_refined = T.clamp(T.add(T.sigmoid(T.add(sep_unrefined, adjust)), act_refined), 0.0, 1.0)
        return ssp_refined, sep_refined, act_input, act_refined


class JSENet(Module):
    def __init__(self, config: TrainConfig, layout: KernelLayout | None = None):
        super().__init__()
        self.config = config
        self.layout = layout or KernelLayout(sigma_factor=config.kernel_sigma_factor)
        rng = np.random.default_rng(config.seed)
        self.theta = self.add_child("theta", SSStream(rng, config, self.layout))
        self.phi = self.add_child("phi", SEDStream(rng, config) if config.streams != "ss_only" else Module())
        self.gamma = self.add_child("gamma", JointRefinement(rng, config, self.layout))

    def partition(self, name: str) -> Module:
        if name not in PARTITIONS:
            raise ContractError(f"unknown parameter partition '{name}'")
        return getattr(self, name)

    def stage_parameters(self, stage: int) -> list[Tensor]:
        """Parameters a training stage updates: theta and phi in stage 1, gamma in stage 2.

        Segmentation layers that an edge-only model never runs are left out.
        """
        if stage == 2:
            return self.gamma.parameters()
        skipped: tuple[str, ...] = ()
        if self.config.streams == "sed_only":
            skipped = ("theta/classifier/",)
            if self.config.enhanced_features:
                skipped += ("theta/decoder", "theta/head/")
        return [
            p for name, p in self.named_parameters()
            if name.startswith(("theta/", "phi/")) and not name.startswith(skipped)
        ]

    def prepare(self, cloud: PointCloud) -> SphereInput:
        """Pyramid, mean filter and input features of a 4 cm-subsampled sphere."""
        pyramid = build_pyramid(
            cloud, self.config.grid_cell, self.config.num_stages, self.config.conv_radius_factor, self.layout
        )
        return SphereInput(cloud, pyramid, build_mean_filter(cloud, self.config.mean_filter_radius), input_features(cloud))

    def streams(self, inputs: SphereInput) -> tuple[Tensor, Tensor, list[Tensor], list[Tensor]]:
        """Unrefined SSP and SEP logits plus side heads; a stream left out by
        `config.streams` contributes zero logits and no heads."""
        config = self.config
        stage_features = self.theta.encoder(inputs.pyramid, inputs.features)
        absent = Tensor(np.zeros((len(inputs.cloud), config.num_classes)))
        decoded = None
        if config.streams != "sed_only" or not config.enhanced_features:
            decoded = self.theta.decode_features(inputs.pyramid, stage_features)
        ssp = self.theta.classifier(decoded) if config.streams != "sed_only" else absent
        if config.streams == "ss_only":
            return ssp, absent, [], []
        sep, binary_heads, ssp_heads = self.phi(inputs.pyramid, stage_features, decoded)
        return ssp, sep, binary_heads, ssp_heads

    def forward(self, inputs: SphereInput, refine: bool | None = None, freeze_streams: bool = False) -> JSENetOutputs:
        """Both streams then, unless bypassed, the joint refinement.

        With `freeze_streams`, the streams run without gradient tracking so only
        the refinement module receives gradients.
        """
        refine = self.config.use_jrm if refine is None else refine
        if freeze_streams:
            with T.no_grad():
                ssp, sep, binary_heads, ssp_heads = self.streams(inputs)
        else:
            ssp, sep, binary_heads, ssp_heads = self.streams(inputs)
        if not refine:
            edges = T.sigmoid(sep) if self.config.streams != "ss_only" else Tensor(np.zeros(sep.shape))
            return JSENetOutputs(ssp, sep, ssp, edges, binary_heads, ssp_heads)
        ssp_refined, sep_refined, act_input, act_refined = self.gamma(inputs.pyramid, inputs.mean_filter, ssp, sep)
        return JSENetOutputs(ssp, sep, ssp_refined, sep_refined, binary_heads, ssp_heads, act_input, act_refined)

    def summary(self) -> dict[str, int]:
        """Parameter counts per partition and in total."""
        counts = {name: self.partition(name).num_parameters() for name in PARTITIONS}
        counts["total"] = sum(counts.values())
        return counts


def full_forward(model: JSENet, cloud: PointCloud, refine: bool | None = None) -> JSENetOutputs:
    return model.forward(model.prepare(cloud), refine)
