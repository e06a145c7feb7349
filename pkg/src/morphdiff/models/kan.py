"""Kolmogorov-Arnold layers: learnable B-spline edge functions on top of a silu base path."""
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..errors import ShapeError
from ..nn import Conv2d, Module, Parameter
from ..tensor import Function, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplineGrid:
    order: int = 3
    num_intervals: int = 5
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"degenerate spline grid: lo={self.lo} must be below hi={self.hi}")
        if self.order < 1 or self.num_intervals < 1:
            raise ValueError(f"spline grid needs order >= 1 and at least one interval, got {self}")

    @cached_property
    def knots(self) -> np.ndarray:
        # uniform spacing, extended by `order` knots past each end of [lo, hi]
        step = (self.hi - self.lo) / self.num_intervals
        return np.arange(-self.order, self.num_intervals + self.order + 1, dtype=np.float64) * step + self.lo

    @property
    def num_basis(self) -> int:
        return self.num_intervals + self.order


def _cox_de_boor(x: np.ndarray, grid: SplineGrid) -> tuple[np.ndarray, np.ndarray]:
    """Basis values of the grid's order and of order - 1, shaped (..., n)."""
    t = grid.knots
    x = np.asarray(x, dtype=np.float64)[..., None]
    bases = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    previous = bases
    for k in range(1, grid.order + 1):
        previous = bases
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1]) * bases[..., :-1]
        right = (t[k + 1 :] - x) / (t[k + 1 :] - t[1:-k]) * bases[..., 1:]
        bases = left + right
    return bases, previous


def bspline_basis(x: float, grid: SplineGrid) -> np.ndarray:
    """All G + order basis functions at ``x``; x is clamped into the grid domain first."""
    bases, _ = _cox_de_boor(np.clip(x, grid.lo, grid.hi), grid)
    return bases


class SplineBasis(Function):
    def forward(self, x, grid: SplineGrid):
        bases, previous = _cox_de_boor(x, grid)
        t, k, n = grid.knots, grid.order, grid.num_basis
        left = k / (t[k : k + n] - t[:n])
        right = k / (t[k + 1 : k + 1 + n] - t[1 : 1 + n])
        self.derivative = left * previous[..., :n] - right * previous[..., 1 : n + 1]
        return bases

    def backward(self, grad):
        return (np.sum(grad * self.derivative, axis=-1),)


class KanLayer(Module):
    """out[o] = sum_i base[o,i]*silu(x_i) + scale[o,i] * sum_j coeffs[o,i,j] * B_j(clamp(x_i))."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, grid: SplineGrid | None = None):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.grid = grid or SplineGrid()
        self.coeffs = Parameter(rng.normal(0.0, 0.1 / np.sqrt(in_dim), size=(out_dim, in_dim, self.grid.num_basis)))
        self.base = Parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
        self.scale = Parameter(np.ones((out_dim, in_dim)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"KanLayer expects batch×{self.in_dim} input, got {x.shape}")
        batch = x.shape[0]
        base_out = x.silu() @ self.base.transpose()

        bases = SplineBasis.apply(x.clamp(self.grid.lo, self.grid.hi), grid=self.grid)
        flat = bases.reshape(batch, self.in_dim * self.grid.num_basis)
        weighted = (self.coeffs * self.scale.reshape(self.out_dim, self.in_dim, 1)).reshape(
            self.out_dim, self.in_dim * self.grid.num_basis
        )
        return base_out + flat @ weighted.transpose()


def kan_forward(layer: KanLayer, x: Tensor) -> Tensor:
    return layer(x)


class KanNetwork(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, grid: SplineGrid | None = None):
        self.kan = [KanLayer(a, b, rng, grid) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.kan:
            x = layer(x)
        return x


class KanBlock(Module):
    """Same-padded conv followed by one KAN layer shared across pixels."""

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator, grid: SplineGrid | None = None
    ):
        self.conv = Conv2d(in_channels, out_channels, rng)
        self.kan = KanLayer(out_channels, out_channels, rng, grid)

    def forward(self, x: Tensor, shift: Tensor | None = None) -> Tensor:
        y = self.conv(x)
        if shift is not None:
            y = y + shift
        channels, height, width = y.shape
        pixels = y.reshape(channels, height * width).transpose()
        out = self.kan(pixels)
        return out.transpose().reshape(channels, height, width)


def kan_block_forward(block: KanBlock, x: Tensor) -> Tensor:
    return block(x)
