"""Spatial operators on C×H×W tensors: convolution, resampling, softmax and bilinear gathers."""
import numpy as np

from .errors import ShapeError
from .tensor import Function, Tensor


class Conv2d(Function):
    """Cross-correlation of a C_in×H×W input with a C_out×C_in×k×k kernel."""

    def forward(self, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 3 or w.ndim != 4:
            raise ShapeError(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape} and {w.shape}")
        if x.shape[0] != w.shape[1]:
            raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
        if padding < 0 or stride < 1:
            raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")

        _, height, width = x.shape
        _, _, kh, kw = w.shape
        span_h, span_w = height + 2 * padding - kh, width + 2 * padding - kw
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            raise ShapeError(
                f"conv2d: non-integral output size for input {x.shape}, kernel {kh}×{kw}, "
                f"stride {stride}, padding {padding}"
            )
        out_h, out_w = span_h // stride + 1, span_w // stride + 1

        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        self.xp, self.w = xp, w
        self.stride, self.padding = stride, padding
        self.in_hw, self.out_hw = (height, width), (out_h, out_w)

        out = np.zeros((w.shape[0], out_h, out_w), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(w[:, :, i, j], self._window(xp, i, j), axes=(1, 0))
        return out

    def _window(self, xp, i, j):
        out_h, out_w = self.out_hw
        s = self.stride
        return xp[:, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s]

    def backward(self, grad):
        w, xp = self.w, self.xp
        out_h, out_w = self.out_hw
        s, p = self.stride, self.padding
        dxp = np.zeros_like(xp, dtype=np.result_type(xp, grad))
        dw = np.zeros_like(w, dtype=np.result_type(w, grad))
        for i in range(w.shape[2]):
            for j in range(w.shape[3]):
                dw[:, :, i, j] = np.tensordot(grad, self._window(xp, i, j), axes=([1, 2], [1, 2]))
                dxp[:, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += np.tensordot(
                    w[:, :, i, j], grad, axes=(0, 0)
                )
        height, width = self.in_hw
        return dxp[:, p : p + height, p : p + width], dw


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


class Resample2x(Function):
    """2×2 average pooling (down) or nearest-neighbour replication (up) over the last two axes."""

    def forward(self, x, direction: str):
        if x.ndim < 2:
            raise ShapeError(f"resample2x needs at least 2 dims, got {x.shape}")
        self.direction = direction
        height, width = x.shape[-2:]
        if direction == "down":
            if height % 2 or width % 2:
                raise ShapeError(f"resample2x down needs even H and W, got {height}×{width}")
            lead = x.shape[:-2]
            return x.reshape(*lead, height // 2, 2, width // 2, 2).mean(axis=(-3, -1))
        if direction == "up":
            return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)
        raise ValueError(f"unknown resample direction {direction!r}")

    def backward(self, grad):
        if self.direction == "down":
            return (np.repeat(np.repeat(grad, 2, axis=-2), 2, axis=-1) / 4,)
        height, width = grad.shape[-2:]
        lead = grad.shape[:-2]
        return (grad.reshape(*lead, height // 2, 2, width // 2, 2).sum(axis=(-3, -1)),)


def resample2x(x: Tensor, direction: str) -> Tensor:
    return Resample2x.apply(x, direction=direction)


class Softmax(Function):
    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class BilinearSample(Function):
    """Sample every channel of a C×H×W image at continuous (x, y) coordinates.

    ``xs`` indexes columns and ``ys`` rows. Corners that fall outside the image
    read as zero.
    """

    def forward(self, img, xs, ys):
        if img.ndim != 3:
            raise ShapeError(f"bilinear_sample expects a C×H×W image, got {img.shape}")
        if xs.shape != ys.shape:
            raise ShapeError(f"coordinate grids differ: {xs.shape} vs {ys.shape}")
        _, height, width = img.shape
        x0 = np.floor(xs)
        y0 = np.floor(ys)
        wx = xs - x0
        wy = ys - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)

        corners = []
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)
            yc = np.clip(yi, 0, height - 1)
            xc = np.clip(xi, 0, width - 1)
            values = img[:, yc, xc] * valid
            corners.append((yc * width + xc, valid, values))

        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
        self.img_shape = img.shape
        self.corners = corners
        self.wx, self.wy = wx, wy
        return ((1 - wx) * (1 - wy)) * v00 + (wx * (1 - wy)) * v01 + ((1 - wx) * wy) * v10 + (wx * wy) * v11

    def backward(self, grad):
        channels, height, width = self.img_shape
        wx, wy = self.wx, self.wy
        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = self.corners
        weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)

        dimg = np.zeros((channels, height * width), dtype=grad.dtype)
        for (flat, valid, _), weight in zip(self.corners, weights):
            idx = flat[valid]
            for c in range(channels):
                contrib = (grad[c] * weight)[valid]
                dimg[c] += np.bincount(idx, weights=contrib, minlength=height * width)

        dxs = np.sum(grad * ((1 - wy) * (v01 - v00) + wy * (v11 - v10)), axis=0)
        dys = np.sum(grad * ((1 - wx) * (v10 - v00) + wx * (v11 - v01)), axis=0)
        return dimg.reshape(self.img_shape), dxs, dys


def bilinear_sample(img: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    return BilinearSample.apply(img, xs, ys)
