"""DDPM machinery over deformation fields: schedule, corruption, training objective, sampling."""
import logging
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .config import LossWeights
from .errors import NumericalError, ShapeError
from .losses import bae_loss, df_loss
from .models.unet import GuidanceContext
from .tensor import Tensor, no_grad, stack_sum
from .warp import DeformationField, denormalize, warp_image

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step - 1; steps run from 1 to T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray

    def index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside 1..{self.T}")
        return t - 1


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ValueError("need at least one beta")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError(f"betas must lie in (0, 1), got range [{beta.min()}, {beta.max()}]")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(
        T=beta.size,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_var=posterior_var,
    )


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def _field_tensor(phi) -> Tensor:
    return phi.u if isinstance(phi, DeformationField) else phi


def q_sample(phi0: DeformationField | Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """phi_t = sqrt(abar_t) * phi0 + sqrt(1 - abar_t) * eps."""
    u = _field_tensor(phi0)
    if eps.shape != u.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match field shape {u.shape}")
    abar = s.alpha_bar[s.index(t)]
    return u * math.sqrt(abar) + eps * math.sqrt(1.0 - abar)


def predict_phi0(phi_t: Tensor, t: int, eps_pred: Tensor, s: NoiseSchedule) -> Tensor:
    abar = s.alpha_bar[s.index(t)]
    return (phi_t - eps_pred * math.sqrt(1.0 - abar)) / math.sqrt(abar)


class Denoiser(Protocol):
    def guidance(self, aux_images: list[Tensor]) -> Tensor | None: ...

    def __call__(self, phi_t: Tensor, ctx: GuidanceContext) -> Tensor: ...


@dataclass
class LossBreakdown:
    """Batch means. ``l_df``/``l_bae`` carry the abar_t weighting, so
    total = lambda1*l_simple + lambda2*l_df + lambda3*l_bae; ``raw_*`` are unweighted."""

    total: Tensor
    l_simple: float
    l_df: float
    l_bae: float
    raw_df: float
    raw_bae: float

    def as_dict(self) -> dict[str, float]:
        return {"l_simple": self.l_simple, "l_df": self.l_df, "l_bae": self.l_bae, "total": self.total.item()}


def _check_finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {name} loss ({value})", term=name)
    return value


def training_loss(
    batch: Sequence,
    net: Denoiser,
    bae,
    s: NoiseSchedule,
    w: LossWeights,
    rng: np.random.Generator,
    u_max: float = 10.0,
) -> LossBreakdown:
    """Dual objective: noise regression plus field and age losses on the reconstructed phi0.

    Each batch element supplies ``phi0_gt`` (normalized field), ``c1``,
    ``t_age``, ``t_age_norm`` and ``aux_images``. ``bae`` may be None, in
    which case the age term is skipped.
    """
    if not batch:
        raise ValueError("empty training batch")
    totals, simples, dfs, baes, raw_dfs, raw_baes = [], [], [], [], [], []
    for task in batch:
        t = int(rng.integers(1, s.T + 1))
        eps = Tensor(rng.standard_normal(task.phi0_gt.shape))
        phi_t = q_sample(task.phi0_gt, t, eps, s)
        ctx = GuidanceContext(task.c1, t, task.t_age_norm, net.guidance(task.aux_images))
        eps_pred = net(phi_t, ctx)

        l_simple = (eps - eps_pred).square().mean()
        total = l_simple * w.lambda1
        simples.append(l_simple.item())

        weight = float(s.alpha_bar[s.index(t)])
        phi0_hat = predict_phi0(phi_t, t, eps_pred, s)
        raw_df = df_loss(phi0_hat, task.phi0_gt, w.gamma)
        raw_dfs.append(raw_df.item())
        dfs.append(weight * raw_dfs[-1])
        if w.lambda2 > 0:
            total = total + raw_df * (weight * w.lambda2)

        if bae is not None:
            generated = warp_image(task.c1, denormalize(phi0_hat, u_max))
            raw_bae = bae_loss(bae, generated, task.t_age)
            raw_baes.append(raw_bae.item())
            baes.append(weight * raw_baes[-1])
            if w.lambda3 > 0:
                total = total + raw_bae * (weight * w.lambda3)
        else:
            raw_baes.append(0.0)
            baes.append(0.0)
        totals.append(total)

    mean_total = stack_sum(totals) * (1.0 / len(batch))

    breakdown = LossBreakdown(
        total=mean_total,
        l_simple=_check_finite("L_simple", float(np.mean(simples))),
        l_df=_check_finite("L_DF", float(np.mean(dfs))),
        l_bae=_check_finite("L_BAE", float(np.mean(baes))),
        raw_df=float(np.mean(raw_dfs)),
        raw_bae=float(np.mean(raw_baes)),
    )
    _check_finite("total", mean_total.item())
    return breakdown


def sample_field(
    net: Denoiser,
    c1: Tensor,
    t_age_norm: float,
    c2: Tensor | None,
    s: NoiseSchedule,
    seed: int,
    u_max: float = 10.0,
) -> DeformationField:
    """Ancestral sampling from phi_T ~ N(0, I) down to phi_0, in normalized units."""
    rng = np.random.default_rng(seed)
    shape = (2,) + tuple(c1.shape[1:])
    phi = rng.standard_normal(shape).astype(np.float32)
    with no_grad():
        for t in range(s.T, 0, -1):
            i = t - 1
            eps = net(Tensor(phi), GuidanceContext(c1, t, t_age_norm, c2)).data.astype(np.float64)
            mean = (phi - (s.beta[i] / np.sqrt(1.0 - s.alpha_bar[i])) * eps) / np.sqrt(s.alpha[i])
            if t > 1:
                mean = mean + np.sqrt(s.posterior_var[i]) * rng.standard_normal(shape)
            phi = mean.astype(np.float32)
            if not np.all(np.isfinite(phi)):
                raise NumericalError(f"non-finite field values at sampling step {t}", step=t)

    outside = float(np.mean(np.abs(phi) > 1.5))
    if outside > 0.01:
        logger.warning(f"{outside:.1%} of sampled field values lie outside [-1.5, 1.5]")
    logger.debug(f"Sampled field with {outside:.2%} of values outside [-1.5, 1.5]")
    return DeformationField(Tensor(phi), normalized=True, u_max=u_max)
