"""The trainable completion network: DiffKAN U-Net plus optional F-TIE guidance encoder."""
import logging

import numpy as np

from ..config import ModelSpec
from ..nn import Module
from ..tensor import Tensor
from .ftie import FtieConfig, FtieModule, build_guidance
from .kan import SplineGrid
from .unet import DiffKanUnet, GuidanceContext

logger = logging.getLogger(__name__)


class DiffCom(Module):
    """Parameters live under ``unet.*`` and ``ftie.*``; ``use_ftie = False`` drops
    both the encoder and the cross-attention site."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        grid = SplineGrid(order=spec.kan_order, num_intervals=spec.kan_grid_size)
        self.unet = DiffKanUnet(
            rng,
            base_width=spec.base_width,
            emb_dim=spec.emb_dim,
            guidance_dim=spec.guidance_dim,
            use_kan=spec.use_kan,
            use_attention=spec.use_ftie,
            grid=grid,
        )
        self.ftie = (
            FtieModule(FtieConfig(N=spec.max_aux, feat_dim=spec.feat_dim, guidance_dim=spec.guidance_dim), rng)
            if spec.use_ftie
            else None
        )

    def guidance(self, aux_images: list[Tensor]) -> Tensor | None:
        if len(aux_images) > self.spec.max_aux:
            raise ValueError(f"at most N={self.spec.max_aux} auxiliary images are supported, got {len(aux_images)}")
        if self.ftie is None:
            return None
        return build_guidance(self.ftie, aux_images)

    def forward(self, phi_t: Tensor, ctx: GuidanceContext) -> Tensor:
        return self.unet(phi_t, ctx)


def build_model(spec: ModelSpec, seed: int = 0) -> DiffCom:
    model = DiffCom(spec, np.random.default_rng(seed))
    logger.info(
        f"Built DiffCom (kan={spec.use_kan}, ftie={spec.use_ftie}) with {model.num_parameters()} parameters"
    )
    return model
