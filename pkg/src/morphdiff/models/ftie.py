"""Flexible temporal guidance: up to N auxiliary scans become one fixed-length vector c2.

Each image goes through a shared CNN encoder. The feature vectors fill slots in
the order given (callers pass them in ascending acquisition age). Unused slots
stay zero and a single linear projection maps the concatenation to c2. Slots are
ordered, so permuting the inputs generally changes c2.
"""
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..functional import resample2x
from ..nn import Conv2d, Linear, Module
from ..tensor import Tensor, concat

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FtieConfig:
    N: int = 3
    feat_dim: int = 32
    guidance_dim: int = 64

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"F-TIE needs at least one slot, got N={self.N}")

    @property
    def concat_dim(self) -> int:
        return self.N * self.feat_dim


class FtieEncoder(Module):
    def __init__(self, feat_dim: int, rng: np.random.Generator, width: int = 8):
        self.conv1 = Conv2d(1, width, rng)
        self.conv2 = Conv2d(width, 2 * width, rng)
        self.head = Linear(2 * width, feat_dim, rng)

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 3 or img.shape[0] != 1:
            raise ShapeError(f"F-TIE encoder expects a 1×H×W image, got {img.shape}")
        if img.shape[1] % 4 or img.shape[2] % 4:
            raise ShapeError(f"F-TIE encoder needs H and W divisible by 4, got {img.shape[1:]}")
        h = resample2x(self.conv1(img).silu(), "down")
        h = resample2x(self.conv2(h).silu(), "down")
        return self.head(h.mean(axis=(1, 2)))


class FtieModule(Module):
    def __init__(self, config: FtieConfig, rng: np.random.Generator):
        self.config = config
        self.enc = FtieEncoder(config.feat_dim, rng)
        self.proj = Linear(config.concat_dim, config.guidance_dim, rng)

    def forward(self, imgs: list[Tensor]) -> Tensor:
        return build_guidance(self, imgs)


def encode_image(m: FtieModule, img: Tensor) -> Tensor:
    return m.enc(img)


def build_guidance_slots(m: FtieModule, slots: dict[int, Tensor]) -> Tensor:
    """Project images placed at explicit slot indices; every other slot is zero."""
    cfg = m.config
    bad = [s for s in slots if not 0 <= s < cfg.N]
    if bad:
        raise ValueError(f"slot indices {bad} outside 0..{cfg.N - 1}")
    parts = []
    for slot in range(cfg.N):
        if slot in slots:
            parts.append(encode_image(m, slots[slot]))
        else:
            parts.append(Tensor(np.zeros(cfg.feat_dim)))
    return m.proj(concat(parts, axis=0))


def build_guidance(m: FtieModule, imgs: list[Tensor]) -> Tensor:
    if len(imgs) > m.config.N:
        raise ValueError(f"at most N={m.config.N} auxiliary images are supported, got {len(imgs)}")
    return build_guidance_slots(m, dict(enumerate(imgs)))
