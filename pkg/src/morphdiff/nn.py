"""Parameter containers and the plain layers shared by every network."""
import logging
from typing import Iterator

import numpy as np

from .errors import CheckpointError, ShapeError
from .functional import conv2d
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class with named parameter traversal.

    Parameters are discovered from instance attributes in assignment order:
    ``Parameter`` values, nested ``Module`` values and lists of either. Names are
    dotted attribute paths, e.g. ``enc1.conv.weight`` or ``kan.0.coeffs``.
    """

    frozen = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(own.keys() - state.keys())
        unexpected = sorted(state.keys() - own.keys())
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise CheckpointError(f"{name}: stored shape {value.shape} does not match model shape {param.shape}")
            param.data = value.astype(param.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        if zero_init:
            self.weight = Parameter(np.zeros((out_dim, in_dim)))
        else:
            self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects {self.in_dim} input features, got {x.shape}")
        y = x @ self.weight.transpose()
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(self.out_dim) if squeeze else y


class Conv2d(Module):
    """Same-padded convolution with a per-channel bias."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3):
        if kernel_size % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel size, got {kernel_size}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.padding = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, stride=1, padding=self.padding)
        return y + self.bias.reshape(self.out_channels, 1, 1)


class Mlp(Module):
    """Stack of Linear layers with silu between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.silu()
        return x
