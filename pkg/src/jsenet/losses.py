"""Supervision terms: segmentation, multi-label edge, binary edge, dual edge, and the total."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from jsenet import tensor as T
from jsenet.errors import ContractError, DimensionError
from jsenet.labels import OneHotMask
from jsenet.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    seg: float
    edge: float = 1.0
    bce: float = 1.0
    dual: float = 1.0

    @classmethod
    def for_classes(cls, num_classes: int) -> "LossWeights":
        """Segmentation weight equal to the class count, all others unit."""
        return cls(seg=float(num_classes))


def _check_beta(beta, what: str) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.size and (beta.min() < 0.0 or beta.max() > 1.0):
        raise ContractError(f"{what} must lie in [0, 1], got range [{beta.min()}, {beta.max()}]")
    return beta


def loss_seg(target: OneHotMask, probs: Tensor) -> Tensor:
    """Mean cross-entropy over non-ignored points."""
    if probs.shape != target.values.shape:
        raise DimensionError("loss_seg", target.values.shape, probs.shape)
    valid = int((~target.ignore).sum())
    if valid == 0:
        logger.warning("Every point is ignored; segmentation loss is zero")
        return T.mul(T.sum(probs), 0.0)
    weights = -target.values * (~target.ignore)[:, None] / valid
    return T.sum(T.mul(T.log(probs), weights))


def _weighted_bce(target: np.ndarray, probs: Tensor, beta: np.ndarray) -> Tensor:
    n = target.shape[0]
    pos = -beta * target / n
    neg = -(1.0 - beta) * (1.0 - target) / n
    return T.add(
        T.sum(T.mul(T.log(probs), pos)),
        T.sum(T.mul(T.log(T.sub(1.0, probs)), neg)),
    )


def loss_edge(target: np.ndarray, probs: Tensor, beta_k) -> Tensor:
    """Class-balanced multi-label loss, summed over classes and averaged over points.

    target: (N, K) 0/1 edge maps; probs: (N, K) post-sigmoid values; beta_k: (K,).
    """
    target = np.asarray(target, dtype=np.float64)
    beta_k = _check_beta(beta_k, "beta_k")
    if probs.shape != target.shape or beta_k.shape != (target.shape[1],):
        raise DimensionError("loss_edge", target.shape, probs.shape, beta_k.shape)
    if target.shape[0] == 0:
        raise ContractError("loss_edge over zero points")
    return _weighted_bce(target, probs, beta_k[None, :])


def loss_bce(target: np.ndarray, probs: Tensor, beta: float) -> Tensor:
    """Class-balanced binary cross-entropy averaged over points; target and probs are (N, 1)."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    beta = float(_check_beta(beta, "beta"))
    if probs.shape != target.shape:
        raise DimensionError("loss_bce", target.shape, probs.shape)
    if target.shape[0] == 0:
        raise ContractError("loss_bce over zero points")
    return _weighted_bce(target, probs, np.asarray(beta))


def loss_dual(target: np.ndarray, activations: Tensor, beta: float) -> Tensor:
    """beta-weighted L1 mismatch between edge activation maps, summed over classes, averaged over points."""
    target = np.asarray(target, dtype=np.float64)
    beta = float(_check_beta(beta, "beta"))
    if activations.shape != target.shape:
        raise DimensionError("loss_dual", target.shape, activations.shape)
    if target.shape[0] == 0:
        raise ContractError("loss_dual over zero points")
    return T.mul(T.sum(T.abs(T.sub(activations, target))), beta / target.shape[0])


@dataclass
class LossComponents:
    """Individual terms grouped the way the total weights them."""

    seg: list[Tensor] = field(default_factory=list)
    edge: list[Tensor] = field(default_factory=list)
    bce: list[Tensor] = field(default_factory=list)
    dual: list[Tensor] = field(default_factory=list)

    def groups(self) -> dict[str, list[Tensor]]:
        return {"seg": self.seg, "edge": self.edge, "bce": self.bce, "dual": self.dual}

    def values(self) -> dict[str, float]:
        return {name: float(np.sum([t.item() for t in terms])) for name, terms in self.groups().items()}


def loss_total(components: LossComponents, weights: LossWeights) -> Tensor:
    """seg*sum(L_seg) + edge*sum(L_edge) + bce*sum(L_bce) + dual*sum(L_dual)."""
    total: Tensor | None = None
    for name, terms in components.groups().items():
        for term in terms:
            if term.size != 1:
                raise DimensionError(f"loss_total[{name}]", term.shape)
            if not term.item() >= 0.0:
                raise ContractError(f"loss component '{name}' is negative or NaN: {term.item()}")
            weighted = T.mul(term, getattr(weights, name))
            total = weighted if total is None else T.add(total, weighted)
    if total is None:
        return Tensor(0.0)
    return total
