"""JSEC checkpoint files.

Layout: magic "JSEC", version u32, count u32, then per entry a u16 name length,
the UTF-8 name, rank u8, u32 extents, a u8 value width (4 or 8 bytes) and the
little-endian IEEE-754 values. Version 1 files have no width byte and hold
float32 only.
Entry names are the model's parameter paths ("theta/...", "phi/...",
"gamma/..."), batch-norm running statistics, and "kernel/points".
Float64 arrays keep their width, so a reloaded model continues training
exactly where the saved one stopped.
The training config travels next to it as `<name>.cfg`.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from jsenet.config import TrainConfig, load_config
from jsenet.errors import ContractError, InputError
from jsenet.kpconv import KernelLayout
from jsenet.model import JSENet

logger = logging.getLogger(__name__)

MAGIC = b"JSEC"
VERSION = 2
WIDTHS = {4: "<f4", 8: "<f8"}
KERNEL_ENTRY = "kernel/points"


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        width = 8 if value.dtype == np.float64 else 4
        chunks.append(struct.pack(f"<B{value.ndim}IB", value.ndim, *value.shape, width))
        chunks.append(value.astype(WIDTHS[width]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: '{path}'")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise InputError(f"'{path}' is not a JSEC checkpoint")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version not in (1, VERSION):
            raise InputError(f"unsupported checkpoint version {version}")
        offset = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + length].decode("utf-8")
            offset += length
            (rank,) = struct.unpack_from("<B", raw, offset)
            shape = struct.unpack_from(f"<{rank}I", raw, offset + 1)
            offset += 1 + 4 * rank
            width = 4
            if version > 1:
                (width,) = struct.unpack_from("<B", raw, offset)
                offset += 1
                if width not in WIDTHS:
                    raise InputError(f"checkpoint '{path}': entry '{name}' has value width {width}")
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(raw, dtype=WIDTHS[width], count=size, offset=offset)
            tensors[name] = values.reshape(shape).astype(WIDTHS[width][1:])
            offset += width * size
    except (struct.error, ValueError) as exc:
        raise InputError(f"truncated checkpoint '{path}': {exc}") from None
    if offset != len(raw):
        raise InputError(f"checkpoint '{path}' has {len(raw) - offset} trailing bytes")
    return tensors


def model_tensors(model: JSENet) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in model.named_parameters()}
    for name, state in model.named_norm_states():
        tensors[f"{name}/running_mean"] = state.running_mean
        tensors[f"{name}/running_var"] = state.running_var
        tensors[f"{name}/count"] = np.array([state.count], dtype=np.float64)
    tensors[KERNEL_ENTRY] = model.layout.points
    return tensors


def config_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".cfg")


def save_checkpoint(path: str | Path, model: JSENet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, model_tensors(model))
    config_path(path).write_text(model.config.to_text(), encoding="utf-8")
    logger.debug("Wrote checkpoint %s", path)
    return path


def load_state(model: JSENet, tensors: dict[str, np.ndarray]) -> None:
    expected = {name: value for name, value in model_tensors(model).items() if name != KERNEL_ENTRY}
    # Version 1 files carry no batch counts; those states restart their warm-up.
    missing = sorted(name for name in set(expected) - set(tensors) if not name.endswith("/count"))
    unknown = sorted(set(tensors) - set(expected) - {KERNEL_ENTRY})
    if missing or unknown:
        raise ContractError(f"checkpoint does not fit the model: missing {missing[:3]}, unknown {unknown[:3]}")
    params = dict(model.named_parameters())
    states = dict(model.named_norm_states())
    for name, value in tensors.items():
        if name == KERNEL_ENTRY:
            continue
        if value.shape != expected[name].shape:
            raise ContractError(f"checkpoint entry '{name}' has shape {value.shape}, model expects {expected[name].shape}")
        if name in params:
            params[name].data = value.astype(params[name].data.dtype)
        else:
            owner, stat = name.rsplit("/", 1)
            if stat == "count":
                states[owner].count = int(value[0])
            else:
                setattr(states[owner], stat, value.astype(np.float64))


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> JSENet:
    """Rebuild a model from a checkpoint and its config sidecar."""
    if config is None:
        sidecar = config_path(path)
        config = load_config(sidecar) if sidecar.exists() else TrainConfig()
    tensors = read_tensors(path)
    layout = None
    if KERNEL_ENTRY in tensors:
        layout = KernelLayout(tensors[KERNEL_ENTRY].astype(np.float64), config.kernel_sigma_factor)
    model = JSENet(config, layout)
    load_state(model, tensors)
    return model.eval()


def section_digest(tensors: dict[str, np.ndarray], prefix: str) -> str:
    """SHA-256 over the float32 bytes of every entry under `prefix`."""
    digest = hashlib.sha256()
    for name in sorted(n for n in tensors if n.startswith(prefix)):
        digest.update(name.encode("utf-8"))
        digest.update(np.asarray(tensors[name]).astype("<f4").tobytes())
    return digest.hexdigest()
