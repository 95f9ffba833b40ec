"""Parameter containers and small layers."""

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from focalcvae import functional as F
from focalcvae.counters import flop_scope
from focalcvae.errors import DimensionError
from focalcvae.rng import Rng
from focalcvae.tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True, dtype=get_default_dtype())


def fan_in_uniform(rng: Rng, shape: Tuple[int, ...], fan_in: int) -> Parameter:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, shape))


def zeros_parameter(*shape: int) -> Parameter:
    return Parameter(np.zeros(shape, dtype=get_default_dtype()))


class Module:
    """Base class: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"parameter {name} has the wrong shape", value.shape, p.shape)
            p.data = value.astype(p.dtype, copy=True)


class Linear(Module):
    """``y = x W + b`` applied over the last axis."""

    def __init__(self, rng: Rng, in_features: int, out_features: int, bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.weight = zeros_parameter(in_features, out_features)
        else:
            self.weight = fan_in_uniform(rng, (in_features, out_features), in_features)
        self.bias = zeros_parameter(out_features) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        with flop_scope("projection"):
            return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        rng: Rng,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        pad: Optional[int] = None,
        zero_init: bool = False,
    ):
        shape = (out_channels, in_channels, kernel, kernel)
        if zero_init:
            self.weight = zeros_parameter(*shape)
        else:
            self.weight = fan_in_uniform(rng, shape, in_channels * kernel * kernel)
        self.bias = zeros_parameter(out_channels)
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        with flop_scope("conv"):
            return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim, dtype=get_default_dtype()))
        self.bias = zeros_parameter(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, axis=-1)


class FeedForward(Module):
    def __init__(self, rng: Rng, dim: int, hidden: int, activation: str = "none"):
        self.fc1 = Linear(rng.fork(0), dim, hidden)
        self.fc2 = Linear(rng.fork(1), hidden, dim)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x), self.activation))


def sinusoidal_positions(length: int, dim: int) -> Tensor:
    """Fixed sine/cosine sequence positions ``[length, dim]``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return Tensor(table)
