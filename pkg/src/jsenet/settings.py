"""Environment configuration (.env aware)."""

import os
from pathlib import Path

from dotenv import load_dotenv

from jsenet.errors import InputError

load_dotenv()


def get_home_dir() -> Path:
    """Get the working directory for checkpoints and logs, creating it if needed."""
    home = Path(os.environ.get("JSENET_HOME", str(Path.home() / ".jsenet")))
    home.mkdir(mode=0o700, parents=True, exist_ok=True)
    return home


def get_threads() -> int:
    """Worker cap for per-scene parallel work (JSENET_THREADS)."""
    raw = os.environ.get("JSENET_THREADS", "")
    if raw:
        try:
            threads = int(raw)
        except ValueError:
            raise InputError(f"Invalid JSENET_THREADS: '{raw}'. Expected a positive integer.") from None
        if threads < 1:
            raise InputError(f"Invalid JSENET_THREADS: '{raw}'. Expected a positive integer.")
        return threads
    return os.cpu_count() or 1


def get_precision_bits() -> int:
    """Default float width of the tensor engine (JSENET_PRECISION: 32 or 64)."""
    raw = os.environ.get("JSENET_PRECISION", "32")
    if raw not in ("32", "64"):
        raise InputError(f"Invalid JSENET_PRECISION: '{raw}'. Expected 32 or 64.")
    return int(raw)


def get_checkpoint_path() -> Path | None:
    """Checkpoint loaded by the MCP server session, if configured."""
    raw = os.environ.get("JSENET_CHECKPOINT")
    return Path(raw) if raw else None
