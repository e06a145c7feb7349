"""Spatial-transformer style pull warping of images and label maps by displacement fields."""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .functional import bilinear_sample
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class DeformationField:
    """Channel 0 is the column (x) displacement, channel 1 the row (y) displacement.

    Normalized fields are clamped to [-1, 1] on creation; ``clamp_count`` records
    how many elements were clipped.
    """

    u: Tensor
    normalized: bool = False
    u_max: float = 10.0
    clamp_count: int = 0

    def __post_init__(self):
        if not isinstance(self.u, Tensor):
            self.u = Tensor(self.u)
        if self.u.ndim != 3 or self.u.shape[0] != 2:
            raise ShapeError(f"a deformation field is 2×H×W, got {self.u.shape}")
        if self.normalized:
            outside = int(np.count_nonzero(np.abs(self.u.data) > 1.0))
            if outside:
                self.u = Tensor(np.clip(self.u.data, -1.0, 1.0))
                self.clamp_count += outside
                logger.warning(f"Clamped {outside} field elements into [-1, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.u.shape

    def numpy(self) -> np.ndarray:
        return self.u.numpy()


def identity_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_image(img: Tensor, field: DeformationField | Tensor) -> Tensor:
    """out(p) = img(p + u(p)); samples that leave the image read as 0."""
    if isinstance(field, DeformationField):
        if field.normalized:
            raise ValueError("warp_image needs a field in pixel units; denormalize it first")
        u = field.u
    else:
        u = field
    if img.ndim != 3 or u.shape != (2,) + img.shape[1:]:
        raise ShapeError(f"image {img.shape} and field {u.shape} do not share an H×W grid")
    xs, ys = identity_grid(*img.shape[1:])
    return bilinear_sample(img, Tensor(xs) + u[0], Tensor(ys) + u[1])


def normalize_field(field: DeformationField, u_max: float) -> DeformationField:
    if u_max <= 0:
        raise ValueError(f"u_max must be positive, got {u_max}")
    scaled = field.u.data / np.float32(u_max)
    return DeformationField(Tensor(scaled), normalized=True, u_max=u_max)


def denormalize(u: Tensor, u_max: float) -> Tensor:
    """Differentiable normalized -> pixel conversion for raw field tensors."""
    if u_max <= 0:
        raise ValueError(f"u_max must be positive, got {u_max}")
    return u * float(u_max)


def denormalize_field(field: DeformationField, u_max: float) -> DeformationField:
    return DeformationField(denormalize(field.u, u_max), normalized=False, u_max=u_max)


def jacobian_determinant(field: DeformationField) -> np.ndarray:
    """det(I + grad u) per pixel; central differences inside, one-sided at the borders."""
    u = field.u.data.astype(np.float64)
    if u.shape[1] < 2 or u.shape[2] < 2:
        raise ShapeError(f"Jacobian needs at least 2×2 pixels, got {u.shape[1:]}")
    dux_dy, dux_dx = np.gradient(u[0])
    duy_dy, duy_dx = np.gradient(u[1])
    return (1 + dux_dx) * (1 + duy_dy) - dux_dy * duy_dx


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(labels.shape[-2:])
    return (labels[None] == np.arange(num_labels)[:, None, None]).astype(np.float32)


def warp_segmentation(labels: Tensor, field: DeformationField, num_labels: int = 3) -> Tensor:
    """Warp each label's one-hot channel bilinearly, then take the argmax."""
    channels = Tensor(one_hot(labels.data, num_labels))
    warped = warp_image(channels, field).data
    return Tensor(np.argmax(warped, axis=0)[None].astype(np.float32))


def compose_fields(first: DeformationField, second: DeformationField) -> DeformationField:
    """Field equivalent to warping by ``first`` and then by ``second``."""
    carried = warp_image(first.u, second)
    return DeformationField(second.u + carried, normalized=False, u_max=second.u_max)
