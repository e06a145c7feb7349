import math

import numpy as np
import pytest

from src.morphdiff.errors import ShapeError
from src.morphdiff.tensor import Tensor
from src.morphdiff.warp import (
    DeformationField,
    compose_fields,
    denormalize_field,
    jacobian_determinant,
    normalize_field,
    one_hot,
    warp_image,
    warp_segmentation,
)


def brute_force_warp(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-pixel bilinear pull warp with zero outside the image."""
    channels, height, width = img.shape
    out = np.zeros_like(img, dtype=np.float64)

    def pixel(c, y, x):
        return float(img[c, y, x]) if 0 <= y < height and 0 <= x < width else 0.0

    for c in range(channels):
        for i in range(height):
            for j in range(width):
                # coordinates are formed in float32, like the grid the warp builds
                x = float(np.float32(j) + np.float32(u[0, i, j]))
                y = float(np.float32(i) + np.float32(u[1, i, j]))
                x0, y0 = math.floor(x), math.floor(y)
                fx, fy = x - x0, y - y0
                out[c, i, j] = (
                    (1 - fx) * (1 - fy) * pixel(c, y0, x0)
                    + fx * (1 - fy) * pixel(c, y0, x0 + 1)
                    + (1 - fx) * fy * pixel(c, y0 + 1, x0)
                    + fx * fy * pixel(c, y0 + 1, x0 + 1)
                )
    return out


def _field(u) -> DeformationField:
    return DeformationField(Tensor(np.asarray(u)))


def test_zero_field_is_identity_bitwise(rng):
    img = Tensor(rng.uniform(size=(1, 9, 7)))
    out = warp_image(img, _field(np.zeros((2, 9, 7))))
    assert out.data.tobytes() == img.data.tobytes()


def test_unit_shift_moves_columns():
    img = Tensor(np.arange(20.0).reshape(1, 4, 5))
    u = np.zeros((2, 4, 5))
    u[0] = 1.0
    out = warp_image(img, _field(u)).data
    np.testing.assert_array_equal(out[0, :, :-1], img.data[0, :, 1:])
    np.testing.assert_array_equal(out[0, :, -1], 0.0)


def test_half_pixel_shift_interpolates():
    img = Tensor([[[0.0, 1.0]]])
    u = np.zeros((2, 1, 2))
    u[0] = 0.5
    assert warp_image(img, _field(u)).data[0, 0, 0] == pytest.approx(0.5)


def test_matches_brute_force_reference():
    rng = np.random.default_rng(50)
    for _ in range(50):
        img = rng.uniform(size=(1, 6, 7)).astype(np.float32)
        u = rng.uniform(-2.5, 2.5, size=(2, 6, 7)).astype(np.float32)
        out = warp_image(Tensor(img), _field(u)).data
        np.testing.assert_allclose(out, brute_force_warp(img, u), atol=1e-6)


def test_warp_is_linear_in_intensity(rng):
    a, b = Tensor(rng.uniform(size=(1, 8, 8))), Tensor(rng.uniform(size=(1, 8, 8)))
    f = _field(rng.uniform(-1.5, 1.5, size=(2, 8, 8)))
    combined = warp_image(a * 2.0 + b * 0.5, f).data
    np.testing.assert_allclose(combined, 2.0 * warp_image(a, f).data + 0.5 * warp_image(b, f).data, atol=1e-5)


def test_warp_rejects_normalized_and_mismatched_fields(rng):
    img = Tensor(np.ones((1, 4, 4)))
    with pytest.raises(ValueError, match="denormalize"):
        warp_image(img, DeformationField(Tensor(np.zeros((2, 4, 4))), normalized=True))
    with pytest.raises(ShapeError):
        warp_image(img, _field(np.zeros((2, 4, 5))))


def test_field_needs_two_channels():
    with pytest.raises(ShapeError, match="2×H×W"):
        _field(np.zeros((3, 4, 4)))


def test_normalize_values_and_clamping():
    u = np.zeros((2, 2, 2))
    u[0, 0, 0], u[1, 0, 0] = 5.0, -10.0
    u[0, 1, 1] = 15.0
    norm = normalize_field(_field(u), 10.0)
    assert norm.normalized
    assert norm.u.data[0, 0, 0] == 0.5
    assert norm.u.data[1, 0, 0] == -1.0
    assert norm.u.data[0, 1, 1] == 1.0
    assert norm.clamp_count == 1


def test_zero_field_round_trip():
    back = denormalize_field(normalize_field(_field(np.zeros((2, 3, 3))), 10.0), 10.0)
    assert not back.normalized
    np.testing.assert_array_equal(back.u.data, 0.0)


def test_non_positive_u_max_rejected():
    with pytest.raises(ValueError, match="u_max"):
        normalize_field(_field(np.zeros((2, 3, 3))), 0.0)


def test_jacobian_of_identity_and_translation():
    np.testing.assert_array_equal(jacobian_determinant(_field(np.zeros((2, 5, 5)))), 1.0)
    np.testing.assert_allclose(jacobian_determinant(_field(np.full((2, 5, 5), 3.0))), 1.0)


def test_jacobian_of_linear_scaling():
    ys, xs = np.meshgrid(np.arange(7.0), np.arange(7.0), indexing="ij")
    det = jacobian_determinant(_field(np.stack([0.1 * xs, 0.1 * ys])))
    np.testing.assert_allclose(det[1:-1, 1:-1], 1.21, atol=1e-3)


def test_one_hot_channels():
    labels = np.array([[[0.0, 1.0], [2.0, 1.0]]])
    encoded = one_hot(labels, 3)
    assert encoded.shape == (3, 2, 2)
    np.testing.assert_array_equal(encoded.sum(axis=0), 1.0)
    np.testing.assert_array_equal(np.argmax(encoded, axis=0), labels[0])


def test_warped_labels_stay_in_label_set(rng):
    labels = Tensor(rng.integers(0, 3, size=(1, 8, 8)).astype(np.float64))
    out = warp_segmentation(labels, _field(rng.uniform(-2, 2, size=(2, 8, 8))))
    assert set(np.unique(out.data)) <= {0.0, 1.0, 2.0}


def test_labels_follow_their_image():
    ys, xs = np.meshgrid(np.arange(32.0), np.arange(32.0), indexing="ij")
    r = np.hypot(ys - 15.5, xs - 15.5)
    img = np.where(r < 6, 0.9, np.where(r < 12, 0.5, 0.1))[None]
    labels = np.where(r < 6, 2.0, np.where(r < 12, 1.0, 0.0))[None]
    u = -0.15 * np.stack([xs - 15.5, ys - 15.5]) * np.exp(-(r**2) / 200.0)
    field = _field(u)

    warped_img = warp_image(Tensor(img), field).data[0]
    from_img = np.where(warped_img > 0.7, 2.0, np.where(warped_img > 0.3, 1.0, 0.0))
    warped_labels = warp_segmentation(Tensor(labels), field).data[0]
    # only pixels whose intensity is still one of the pure levels, away from smeared boundaries
    stable = np.min(np.abs(warped_img[..., None] - np.array([0.1, 0.5, 0.9])), axis=-1) < 0.05
    assert np.mean(from_img[stable] == warped_labels[stable]) >= 0.99


def test_composition_with_zero_field(rng):
    f = _field(rng.uniform(-1, 1, size=(2, 6, 6)))
    composed = compose_fields(_field(np.zeros((2, 6, 6))), f)
    np.testing.assert_array_equal(composed.u.data, f.u.data)


def test_composition_matches_sequential_warps():
    ys, xs = np.meshgrid(np.arange(16.0), np.arange(16.0), indexing="ij")
    img = Tensor((np.sin(xs / 3.0) * np.cos(ys / 4.0) * 0.5 + 0.5)[None])
    a = _field(0.3 * np.stack([np.sin(ys / 5.0), np.cos(xs / 5.0)]))
    b = _field(0.3 * np.stack([np.cos(ys / 4.0), np.sin(xs / 6.0)]))
    sequential = warp_image(warp_image(img, a), b).data
    composed = warp_image(img, compose_fields(a, b)).data
    np.testing.assert_allclose(sequential[:, 3:-3, 3:-3], composed[:, 3:-3, 3:-3], atol=0.02)
