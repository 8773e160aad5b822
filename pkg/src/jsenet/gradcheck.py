"""Central finite-difference checks of the analytic gradients.

Every suite builds a scalar from a few random leaves and compares the tape
gradients against (f(x + h) - f(x - h)) / 2h entry by entry. At 32-bit the
tape runs in float32 while the differences are taken in float64 on the same
(rounded) inputs, so the check measures the float32 gradient path alone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from jsenet import tensor as T
from jsenet.edgegen import build_mean_filter, emg
from jsenet.errors import ContractError
from jsenet.geometry import PointCloud, neighbor_groups
from jsenet.kpconv import KPConv, conv_geometry
from jsenet.labels import one_hot
from jsenet.losses import loss_bce, loss_dual, loss_edge, loss_seg
from jsenet.tensor import BatchNormState, IndexGroups, Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
TOLERANCE_32 = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(fn: Callable[[], Tensor], leaves: list[Tensor], step: float = STEP) -> float:
    """Largest relative error over all leaves; differences are always taken in float64."""
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()
    with T.Tape() as tape:
        tape.backward(fn())
    worst = 0.0
    originals = [leaf.data for leaf in leaves]
    try:
        with T.no_grad(), T.precision(np.float64):
            for leaf in leaves:
                leaf.data = leaf.data.astype(np.float64)
            for leaf in leaves:
                numeric = np.zeros_like(leaf.data)
                flat, grad = leaf.data.reshape(-1), numeric.reshape(-1)
                for i in range(flat.size):
                    saved = flat[i]
                    flat[i] = saved + step
                    plus = fn().item()
                    flat[i] = saved - step
                    minus = fn().item()
                    flat[i] = saved
                    grad[i] = (plus - minus) / (2.0 * step)
                worst = max(worst, relative_error(leaf.grad, numeric))
    finally:
        for leaf, data in zip(leaves, originals):
            leaf.data = data
    return worst


def _contract(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar sum(out * R) with a fixed random R."""
    return T.sum(T.mul(out, rng.normal(size=out.shape)))


def _cloud(rng: np.random.Generator, n: int, extent: float = 0.2) -> PointCloud:
    return PointCloud(rng.uniform(0.0, extent, size=(n, 3)), labels=rng.integers(0, 3, size=n))


# --- Suites ---

def _op_suites(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    x = Tensor(rng.normal(size=(6, 4)))
    w = Tensor(rng.normal(size=(4, 3)))
    y = Tensor(rng.normal(size=(6, 4)))
    bias = Tensor(rng.normal(size=(4,)))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4))
    beta = Tensor(rng.normal(size=4))
    index = rng.integers(0, 6, size=9)
    groups = IndexGroups.from_lists([[0, 1], [2], [3, 4, 5], [1, 5]])
    positive = Tensor(rng.uniform(0.1, 0.9, size=(6, 4)))
    away_from_zero = Tensor(rng.uniform(0.2, 1.0, size=(6, 4)) * rng.choice([-1.0, 1.0], size=(6, 4)))

    def contract(out: Tensor) -> Tensor:
        return _contract(out, np.random.default_rng(7))

    return {
        "matmul": lambda: check(lambda: contract(T.matmul(x, w)), [x, w]),
        "add": lambda: check(lambda: contract(T.add(x, bias)), [x, bias]),
        "mul": lambda: check(lambda: contract(T.mul(x, y)), [x, y]),
        "concat": lambda: check(lambda: contract(T.concat([x, y], axis=1)), [x, y]),
        "slice_column": lambda: check(lambda: contract(T.slice_column(x, 1, 3)), [x]),
        "gather_rows": lambda: check(lambda: contract(T.gather_rows(x, index)), [x]),
        "scatter_add_rows": lambda: check(lambda: contract(T.scatter_add_rows(x, index[:6], 7)), [x]),
        "leaky_relu": lambda: check(lambda: contract(T.leaky_relu(away_from_zero)), [away_from_zero]),
        "softmax_rows": lambda: check(lambda: contract(T.softmax_rows(x)), [x]),
        "sigmoid": lambda: check(lambda: contract(T.sigmoid(x)), [x]),
        "log": lambda: check(lambda: contract(T.log(positive)), [positive]),
        "abs": lambda: check(lambda: contract(T.abs(away_from_zero)), [away_from_zero]),
        "sum": lambda: check(lambda: T.sum(T.mul(x, x)), [x]),
        "mean_over_index_groups": lambda: check(lambda: contract(T.mean_over_index_groups(x, groups)), [x]),
        "batch_norm": lambda: check(
            lambda: contract(T.batch_norm(x, gamma, beta, BatchNormState(4), training=True)), [x, gamma, beta]
        ),
        "composite": lambda: check(
            lambda: contract(T.softmax_rows(T.matmul(T.leaky_relu(T.add(x, bias)), w))), [x, w, bias]
        ),
    }


def _loss_suites(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    n, k = 40, 3
    labels = rng.integers(-1, k, size=n)
    target = one_hot(labels, k)
    logits = Tensor(rng.normal(size=(n, k)))
    edge_target = (rng.random((n, k)) < 0.3).astype(np.float64)
    edge_probs = Tensor(rng.uniform(0.05, 0.95, size=(n, k)))
    beta_k = 1.0 - edge_target.mean(axis=0)
    binary = edge_target.max(axis=1, keepdims=True)
    bin_probs = Tensor(rng.uniform(0.05, 0.95, size=(n, 1)))
    beta = float(1.0 - binary.mean())
    activations = Tensor(rng.uniform(0.0, 1.0, size=(n, k)))
    dual_target = np.clip(activations.data + rng.choice([-0.3, 0.3], size=(n, k)), 0.0, 1.0)
    return {
        "loss_seg": lambda: check(lambda: loss_seg(target, T.softmax_rows(logits)), [logits]),
        "loss_edge": lambda: check(lambda: loss_edge(edge_target, edge_probs, beta_k), [edge_probs]),
        "loss_bce": lambda: check(lambda: loss_bce(binary, bin_probs, beta), [bin_probs]),
        "loss_dual": lambda: check(lambda: loss_dual(dual_target, activations, beta), [activations]),
    }


def _geometry_suites(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    cloud = _cloud(rng, 30)
    spec = build_mean_filter(cloud, 0.08)
    logits = Tensor(rng.normal(size=(30, 3)))

    support = _cloud(rng, 25)
    radius = 0.1
    geometry = conv_geometry(support.positions, support.positions, neighbor_groups(support, radius), radius)
    conv = KPConv(rng, 4, 5)
    features = Tensor(rng.normal(size=(25, 4)))
    weights_rng = np.random.default_rng(11)
    weights = weights_rng.normal(size=(25, 5))
    emg_weights = weights_rng.normal(size=(30, 3))
    return {
        "emg": lambda: check(lambda: T.sum(T.mul(emg(T.softmax_rows(logits), spec), emg_weights)), [logits]),
        "kpconv": lambda: check(lambda: T.sum(T.mul(conv(features, geometry), weights)), [features, conv.weights]),
    }


def run_suites(seed: int = 0, names: list[str] | None = None, bits: int = 64) -> list[GradCheckResult]:
    """Run every suite (or the named ones) with the tape at `bits` precision."""
    if bits not in (32, 64):
        raise ContractError(f"gradient checks run at 32 or 64 bits, not {bits}")
    dtype, tolerance = (np.float64, TOLERANCE) if bits == 64 else (np.float32, TOLERANCE_32)
    results = []
    with T.precision(dtype):
        rng = np.random.default_rng(seed)
        suites = {**_op_suites(rng), **_loss_suites(rng), **_geometry_suites(rng)}
        for name, suite in suites.items():
            if names and name not in names:
                continue
            start = time.perf_counter()
            error = suite()
            result = GradCheckResult(name, error, time.perf_counter() - start, tolerance)
            logger.debug("gradcheck %s at %d bits: %.2e (%.2fs)", name, bits, error, result.seconds)
            results.append(result)
    return results
