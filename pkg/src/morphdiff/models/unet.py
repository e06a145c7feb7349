"""DiffKAN denoiser: a depth-2 U-Net over concat(phi_t, c1).

The contracting path uses plain conv blocks. The bottleneck and expansive path
use KAN blocks (or conv blocks when ``use_kan`` is off). Step and target-age
embeddings are added to every block's channels. c2 enters through one
cross-attention site at the bottleneck.
"""
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..functional import resample2x, softmax
from ..nn import Conv2d, Linear, Mlp, Module
from ..tensor import Tensor, concat
from .kan import KanBlock, SplineGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceContext:
    c1_source: Tensor
    t: int
    t_age_norm: float
    c2: Tensor | None = None

    def __post_init__(self):
        if not 0.0 <= self.t_age_norm <= 1.0:
            raise ValueError(f"t_age_norm must lie in [0, 1], got {self.t_age_norm}")
        if self.t < 1:
            raise ValueError(f"diffusion step must be >= 1, got {self.t}")


def sinusoidal_embedding(value: float, dim: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs at frequencies 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = float(value) * freqs
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(angles)
    emb[1::2] = np.cos(angles)
    return emb


class StepAgeEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ValueError(f"embedding width must be even, got {dim}")
        self.dim = dim
        self.step_mlp = Mlp([dim, dim, dim], rng)
        self.age_mlp = Mlp([dim, dim, dim], rng)

    def forward(self, t: int, t_age_norm: float) -> Tensor:
        step = self.step_mlp(Tensor(sinusoidal_embedding(t, self.dim)))
        age = self.age_mlp(Tensor(sinusoidal_embedding(t_age_norm * 1000.0, self.dim)))
        return step + age


def embed_step_age(embedder: StepAgeEmbedding, t: int, t_age_norm: float) -> Tensor:
    return embedder(t, t_age_norm)


class CrossAttention(Module):
    """Single-head attention from pixels to one key/value token built from c2.

    With a single key the softmax weight is exactly 1, so every pixel receives
    out(value(c2)); queries and keys only matter once more tokens are added.
    """

    def __init__(self, channels: int, guidance_dim: int, rng: np.random.Generator):
        self.channels = channels
        self.query = Linear(channels, channels, rng, bias=False)
        self.key = Linear(guidance_dim, channels, rng, bias=False)
        self.value = Linear(guidance_dim, channels, rng, bias=False)
        self.out = Linear(channels, channels, rng, zero_init=True)

    def forward(self, features: Tensor, c2: Tensor) -> Tensor:
        channels, height, width = features.shape
        if channels != self.channels:
            raise ShapeError(f"cross-attention expects {self.channels} channels, got {channels}")
        pixels = features.reshape(channels, height * width).transpose()
        token = c2.reshape(1, -1)
        q = self.query(pixels)
        k = self.key(token)
        v = self.value(token)
        weights = softmax(q @ k.transpose() * (1.0 / np.sqrt(channels)), axis=1)
        delta = self.out(weights @ v)
        return features + delta.transpose().reshape(channels, height, width)


def cross_attention(attn: CrossAttention, features: Tensor, c2: Tensor) -> Tensor:
    return attn(features, c2)


class UnetStage(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        emb_dim: int,
        rng: np.random.Generator,
        use_kan: bool,
        grid: SplineGrid | None = None,
    ):
        self.use_kan = use_kan
        self.block = KanBlock(in_channels, out_channels, rng, grid) if use_kan else Conv2d(in_channels, out_channels, rng)
        self.emb_proj = Linear(emb_dim, out_channels, rng)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        shift = self.emb_proj(emb).reshape(-1, 1, 1)
        if self.use_kan:
            return self.block(x, shift)
        return (self.block(x) + shift).silu()


class DiffKanUnet(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        base_width: int = 32,
        emb_dim: int = 64,
        guidance_dim: int = 64,
        use_kan: bool = True,
        use_attention: bool = True,
        grid: SplineGrid | None = None,
    ):
        w = base_width
        self.embed = StepAgeEmbedding(emb_dim, rng)
        self.enc1 = UnetStage(3, w, emb_dim, rng, use_kan=False)
        self.enc2 = UnetStage(w, 2 * w, emb_dim, rng, use_kan=False)
        self.mid = UnetStage(2 * w, 2 * w, emb_dim, rng, use_kan, grid)
        self.attn = CrossAttention(2 * w, guidance_dim, rng) if use_attention else None
        self.dec2 = UnetStage(4 * w, w, emb_dim, rng, use_kan, grid)
        self.dec1 = UnetStage(2 * w, w, emb_dim, rng, use_kan, grid)
        self.head = Conv2d(w, 2, rng)

    def forward(self, phi_t: Tensor, ctx: GuidanceContext) -> Tensor:
        if phi_t.ndim != 3 or phi_t.shape[0] != 2:
            raise ShapeError(f"expected a 2×H×W field, got {phi_t.shape}")
        height, width = phi_t.shape[1:]
        if height % 4 or width % 4:
            raise ShapeError(f"H and W must be divisible by 4, got {height}×{width}")
        if ctx.c1_source.shape != (1, height, width):
            raise ShapeError(f"source image {ctx.c1_source.shape} does not match field {phi_t.shape}")

        emb = self.embed(ctx.t, ctx.t_age_norm)
        h1 = self.enc1(concat([phi_t, ctx.c1_source], axis=0), emb)
        h2 = self.enc2(resample2x(h1, "down"), emb)
        mid = self.mid(resample2x(h2, "down"), emb)
        if self.attn is not None and ctx.c2 is not None:
            mid = self.attn(mid, ctx.c2)
        up2 = self.dec2(concat([resample2x(mid, "up"), h2], axis=0), emb)
        up1 = self.dec1(concat([resample2x(up2, "up"), h1], axis=0), emb)
        return self.head(up1)


def denoise(net: DiffKanUnet, phi_t: Tensor, ctx: GuidanceContext) -> Tensor:
    return net(phi_t, ctx)
