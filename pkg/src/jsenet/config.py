"""Training and model configuration: flat `key = value` files plus CLI overrides."""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from jsenet.errors import InputError
from jsenet.losses import LossWeights

SIDE_SUPERVISION = {
    "mixed": ("bce", "bce", "bce", "seg", "seg"),
    "bce_all": ("bce",) * 5,
    "seg_all": ("seg",) * 5,
    "none": (None,) * 5,
}
STREAMS = ("both", "ss_only", "sed_only")


BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str, kind: type) -> Any:
    try:
        if kind is bool:
            return BOOL_WORDS[raw.strip().lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise InputError(f"config '{name}': cannot read '{raw}' as {kind.__name__}") from None


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int = 13
    sphere_radius: float = 2.0
    grid_cell: float = 0.04
    lr: float = 0.01
    momentum: float = 0.98
    lr_drop: float = 10.0
    lr_drop_every: int = 100
    stage1_epochs: int = 350
    stage2_epochs: int = 150
    steps_per_epoch: int = 500
    lambda_seg: float = 0.0
    lambda_edge: float = 1.0
    lambda_bce: float = 1.0
    lambda_dual: float = 1.0
    emg_radius: float = 0.0
    edge_radius: float = 0.02
    seed: int = 0
    first_features_dim: int = 64
    num_stages: int = 5
    blocks_per_stage: int = 2
    conv_radius_factor: float = 2.5
    kernel_sigma_factor: float = 0.3
    side_width: int = 32
    fusion_width: int = 32
    bn_momentum: float = 0.99
    side_supervision: str = "mixed"
    streams: str = "both"
    enhanced_features: bool = True
    use_jrm: bool = True
    use_dual_loss: bool = True
    augment: bool = True
    checkpoint_every: int = 10
    max_sphere_retries: int = 20

    def __post_init__(self):
        for f in dataclasses.fields(self):
            raw = getattr(self, f.name)
            if isinstance(raw, str) and not isinstance(f.default, str):
                object.__setattr__(self, f.name, _coerce(f.name, raw, type(f.default)))
        positive = [
            "num_classes", "sphere_radius", "grid_cell", "lr", "lr_drop", "lr_drop_every",
            "steps_per_epoch", "first_features_dim", "num_stages", "blocks_per_stage",
            "conv_radius_factor", "kernel_sigma_factor", "side_width", "fusion_width",
            "edge_radius", "checkpoint_every", "max_sphere_retries",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"config '{name}' must be positive, got {getattr(self, name)}")
        for name in ("stage1_epochs", "stage2_epochs", "lambda_seg", "lambda_edge", "lambda_bce", "lambda_dual", "emg_radius"):
            if getattr(self, name) < 0:
                raise InputError(f"config '{name}' must not be negative, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1 or not 0 < self.bn_momentum < 1:
            raise InputError("momentum values must lie in [0, 1)")
        if self.side_supervision not in SIDE_SUPERVISION:
            raise InputError(
                f"unknown side_supervision '{self.side_supervision}', expected one of {sorted(SIDE_SUPERVISION)}"
            )
        if self.num_stages != 5 and self.side_supervision != "none":
            raise InputError("side supervision layouts are defined for five stages")
        if self.num_classes > 64:
            raise InputError("at most 64 classes are supported")
        if self.streams not in STREAMS:
            raise InputError(f"unknown streams '{self.streams}', expected one of {', '.join(STREAMS)}")
        if self.streams != "both" and self.use_jrm:
            raise InputError(f"streams = {self.streams} leaves nothing to refine; set use_jrm = false")

    @property
    def stage_widths(self) -> list[int]:
        return [self.first_features_dim * 2**i for i in range(self.num_stages)]

    @property
    def side_kinds(self) -> tuple[str | None, ...]:
        return SIDE_SUPERVISION[self.side_supervision][: self.num_stages] if self.num_stages == 5 else (None,) * self.num_stages

    @property
    def mean_filter_radius(self) -> float:
        """emg_radius, or the stage-0 convolution radius when unset (0)."""
        return self.emg_radius or self.conv_radius_factor * self.grid_cell

    def loss_weights(self) -> LossWeights:
        """lambda_seg = 0 means 'use the class count'."""
        return LossWeights(
            seg=self.lambda_seg or float(self.num_classes),
            edge=self.lambda_edge,
            bce=self.lambda_bce,
            dual=self.lambda_dual,
        )

    def learning_rate(self, epoch: int) -> float:
        """Initial rate divided by lr_drop every lr_drop_every epochs."""
        return self.lr / self.lr_drop ** (epoch // self.lr_drop_every)

    def replace(self, **changes: Any) -> "TrainConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise InputError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read `key = value` lines the way `.env` files are read; `#` starts a comment."""
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    unknown = sorted(set(values) - {f.name for f in dataclasses.fields(TrainConfig)})
    if unknown:
        raise InputError(f"config: unknown key(s) {', '.join(unknown)}")
    bare = sorted(key for key, value in values.items() if value is None)
    if bare:
        raise InputError(f"config: expected 'key = value' for {', '.join(bare)}")
    return (base or TrainConfig()).replace(**values)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: '{path}'")
    return parse_config_text(path.read_text(encoding="utf-8"), base)
