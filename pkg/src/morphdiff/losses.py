"""Field and critic losses for training, plus the image and field metrics used in reports."""
import logging
import math
from typing import Callable

import numpy as np
from pydantic import BaseModel, Field
from scipy.ndimage import gaussian_filter

from .errors import ShapeError
from .tensor import Tensor
from .warp import DeformationField, jacobian_determinant

logger = logging.getLogger(__name__)

NCC_EPS = 1e-5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_u(field: DeformationField | Tensor) -> Tensor:
    return field.u if isinstance(field, DeformationField) else field


def ncc(a: Tensor, b: Tensor, eps: float = NCC_EPS) -> Tensor:
    """Global zero-mean NCC; C×H×W inputs are scored per channel and averaged."""
    if a.shape != b.shape:
        raise ShapeError(f"ncc: shapes {a.shape} and {b.shape} differ")
    if a.size < 2:
        raise ValueError("ncc needs at least two elements")
    axes = tuple(range(1, a.ndim)) if a.ndim == 3 else None
    da = a - a.mean(axis=axes, keepdims=True)
    db = b - b.mean(axis=axes, keepdims=True)
    num = (da * db).sum(axis=axes)
    den = ((da * da).sum(axis=axes) + eps).sqrt() * ((db * db).sum(axis=axes) + eps).sqrt()
    return (num / den).mean()


def smoothness(field: DeformationField | Tensor) -> Tensor:
    """Mean squared forward difference, averaged over the x and y directions."""
    u = _as_u(field)
    if u.shape[-1] < 2 or u.shape[-2] < 2:
        raise ShapeError(f"smoothness needs H, W >= 2, got {u.shape}")
    dx = u[:, :, 1:] - u[:, :, :-1]
    dy = u[:, 1:, :] - u[:, :-1, :]
    return (dx.square().mean() + dy.square().mean()) * 0.5


def df_loss(phi_pred: DeformationField | Tensor, phi_gt: DeformationField | Tensor, gamma: float) -> Tensor:
    pred, gt = _as_u(phi_pred), _as_u(phi_gt)
    return (1.0 - ncc(pred, gt)) + smoothness(pred) * gamma


def bae_loss(critic: Callable[[Tensor], Tensor], generated_img: Tensor, t_age: float) -> Tensor:
    """Absolute age error in years; gradients pass through the critic to the image."""
    return (critic(generated_img) - float(t_age)).abs().reshape(())


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return float(-10.0 * np.log10(mse / max_val**2))


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    def blur(x):
        # sigma 1.5 truncated at 3.5 sigma is an 11x11 window; reflect is symmetric padding
        return gaussian_filter(x, sigma=1.5, truncate=3.5, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        return _ssim_2d(a, b)
    return float(np.mean([_ssim_2d(x, y) for x, y in zip(a, b)]))


def folding_fraction(field: DeformationField) -> float:
    return float(np.mean(jacobian_determinant(field) <= 0))


class MetricReport(BaseModel):
    psnr_db: float
    ssim: float = Field(ge=-1.0, le=1.0)
    ncc: float
    mean_jacobian: float
    folding_fraction: float = Field(ge=0.0, le=1.0)
    losses: dict[str, float] = {}

    def to_key_value(self) -> str:
        lines = [
            f"psnr_db = {self.psnr_db}",
            f"ssim = {self.ssim}",
            f"ncc = {self.ncc}",
            f"mean_jacobian = {self.mean_jacobian}",
            f"folding_fraction = {self.folding_fraction}",
        ]
        lines += [f"loss_{name} = {value}" for name, value in self.losses.items()]
        return "\n".join(lines) + "\n"


def measure(
    generated: Tensor,
    target: Tensor,
    field_px: DeformationField,
    field_norm: DeformationField,
    gt_norm: DeformationField,
) -> MetricReport:
    """Score one generated image and its field against the ground truth."""
    det = jacobian_determinant(field_px)
    return MetricReport(
        psnr_db=psnr(generated, target),
        ssim=ssim(generated, target),
        ncc=ncc(field_norm.u, gt_norm.u).item(),
        mean_jacobian=float(det.mean()),
        folding_fraction=float(np.mean(det <= 0)),
    )
