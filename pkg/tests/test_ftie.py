import numpy as np
import pytest

from src.morphdiff.errors import ShapeError
from src.morphdiff.gradcheck import finite_difference_check
from src.morphdiff.models.ftie import FtieConfig, FtieModule, build_guidance, build_guidance_slots, encode_image
from src.morphdiff.tensor import Tensor, concat


@pytest.fixture
def ftie(rng):
    return FtieModule(FtieConfig(N=3, feat_dim=4, guidance_dim=6), rng)


def _image(rng, size=8):
    return Tensor(rng.uniform(0.0, 1.0, size=(1, size, size)))


def test_encoder_is_deterministic_and_sized(ftie, rng):
    img = _image(rng, 12)
    a, b = encode_image(ftie, img), encode_image(ftie, Tensor(img.data.copy()))
    assert a.shape == (4,)
    np.testing.assert_array_equal(a.data, b.data)


def test_encoder_rejects_bad_inputs(ftie):
    with pytest.raises(ShapeError, match="1×H×W"):
        encode_image(ftie, Tensor(np.ones((2, 8, 8))))
    with pytest.raises(ShapeError, match="divisible by 4"):
        encode_image(ftie, Tensor(np.ones((1, 6, 8))))


def test_no_images_gives_projection_bias(ftie):
    np.testing.assert_array_equal(build_guidance(ftie, []).data, ftie.proj.bias.data)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_guidance_length_is_fixed(ftie, rng, k):
    assert build_guidance(ftie, [_image(rng) for _ in range(k)]).shape == (6,)


def test_too_many_images_names_n(ftie, rng):
    with pytest.raises(ValueError, match="N=3"):
        build_guidance(ftie, [_image(rng) for _ in range(4)])


def test_two_images_match_hand_projection(ftie, rng):
    a, b = _image(rng), _image(rng)
    features = concat([encode_image(ftie, a), encode_image(ftie, b), Tensor(np.zeros(4))]).data
    expected = ftie.proj.weight.data @ features + ftie.proj.bias.data
    np.testing.assert_allclose(build_guidance(ftie, [a, b]).data, expected, rtol=1e-5, atol=1e-6)


def test_slots_are_additive(ftie, rng):
    a, b = _image(rng), _image(rng)
    bias = ftie.proj.bias.data
    both = build_guidance(ftie, [a, b]).data - bias
    first = build_guidance(ftie, [a]).data - bias
    second = build_guidance_slots(ftie, {1: b}).data - bias
    np.testing.assert_allclose(both, first + second, atol=1e-5)


def test_encoder_gradient(ftie, rng):
    weights = Tensor(rng.standard_normal(4))
    x = rng.uniform(0.0, 1.0, size=(1, 8, 8))
    assert finite_difference_check(lambda t: (encode_image(ftie, t) * weights).sum(), x) < 1e-3
