"""Parameter containers and the point-wise (1x1) building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from jsenet import tensor as T
from jsenet.tensor import BatchNormState, Tensor


class Module:
    """Owns parameters, buffers and child modules; attribute order is registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self._norm_states: dict[str, BatchNormState] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        param = Tensor(value, requires_grad=True, name=name)
        self._params[name] = param
        return param

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def add_norm_state(self, name: str, state: BatchNormState) -> BatchNormState:
        self._norm_states[name] = state
        return state

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_norm_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, state in self._norm_states.items():
            yield prefix + name, state
        for name, child in self._children.items():
            yield from child.named_norm_states(f"{prefix}{name}/")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_requires_grad(self, flag: bool) -> None:
        for param in self.parameters():
            param.requires_grad = flag

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / ((1.0 + T.LEAKY_SLOPE**2) * max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm(Module):
    def __init__(self, channels: int, decay: float = T.BN_DECAY):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.state = self.add_norm_state("bn", BatchNormState(channels, decay))

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class Unary(Module):
    """Shared per-point linear map, optionally followed by batch norm and leaky ReLU."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        norm: bool = True,
        activation: bool = True,
        bn_decay: float = T.BN_DECAY,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        self.weight = self.add_param("weight", kaiming_uniform(rng, (in_channels, out_channels), in_channels))
        if norm:
            self.norm = self.add_child("norm", BatchNorm(out_channels, bn_decay))
            self.bias = None
        else:
            self.norm = None
            self.bias = self.add_param("bias", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        y = self.norm(y) if self.norm is not None else T.add(y, self.bias)
        return T.leaky_relu(y) if self.activation else y
