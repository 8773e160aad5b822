"""Convert numpy-laden results into plain JSON values for tool responses and reports."""

import math
from typing import Any

import numpy as np

DECIMALS = 4


def to_jsonable(data: Any) -> Any:
    """Recursively turn arrays and numpy scalars into lists and Python numbers; floats
    are rounded to four decimals and non-finite floats become None."""
    if isinstance(data, dict):
        return {str(k): to_jsonable(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_jsonable(item) for item in data]
    if isinstance(data, np.ndarray):
        return to_jsonable(data.tolist())
    if isinstance(data, (bool, np.bool_)):
        return bool(data)
    if isinstance(data, (int, np.integer)):
        return int(data)
    if isinstance(data, (float, np.floating)):
        value = float(data)
        return round(value, DECIMALS) if math.isfinite(value) else None
    return data
