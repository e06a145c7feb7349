import numpy as np
import pytest
from scipy.stats import spearmanr

from src.morphdiff.errors import DatasetError, ShapeError
from src.morphdiff.losses import bae_loss
from src.morphdiff.models.bae import BaeModel, evaluate_mae, predict_age, train_bae
from src.morphdiff.synthdata import LongitudinalDataset, make_dataset
from src.morphdiff.tensor import Tape, Tensor, backward, no_grad


def test_same_seed_same_prediction(rng):
    img = Tensor(rng.uniform(size=(1, 16, 16)))
    a = predict_age(BaeModel(np.random.default_rng(5), width=2), img).item()
    b = predict_age(BaeModel(np.random.default_rng(5), width=2), img).item()
    assert a == b


def test_prediction_is_a_finite_scalar():
    out = BaeModel(np.random.default_rng(0), width=2)(Tensor(np.zeros((1, 16, 16))))
    assert out.shape == ()
    assert np.isfinite(out.item())


def test_rejects_multichannel_input():
    with pytest.raises(ShapeError):
        BaeModel(np.random.default_rng(0), width=2)(Tensor(np.zeros((2, 16, 16))))


def test_frozen_critic_passes_gradient_to_image(rng):
    critic = BaeModel(rng, width=2).freeze()
    img = Tensor(rng.uniform(size=(1, 16, 16)), requires_grad=True)
    with Tape():
        backward(critic(img))
    assert img.grad is not None and np.any(img.grad != 0)
    assert all(p.grad is None for p in critic.parameters())
    assert critic.frozen


def test_empty_training_set():
    with pytest.raises(DatasetError, match="empty"):
        train_bae([])


def test_short_training_run(tiny_dataset):
    samples = tiny_dataset.age_samples("bae")
    result = train_bae(samples, epochs=2, seed=0, width=2, batch_size=4)
    assert len(result.history) == 2
    assert all(np.isfinite(h) for h in result.history)
    assert result.model.frozen
    assert result.clean_mae == pytest.approx(evaluate_mae(result.model, samples, 0.0, 0))
    assert np.isfinite(result.noisy_mae)


def test_training_is_deterministic(tiny_dataset):
    samples = tiny_dataset.age_samples("bae")[:4]
    a = train_bae(samples, epochs=1, seed=9, width=2)
    b = train_bae(samples, epochs=1, seed=9, width=2)
    assert a.history == b.history
    assert a.clean_mae == b.clean_mae


@pytest.fixture(scope="module")
def phantom_critic(tmp_path_factory):
    root = tmp_path_factory.mktemp("critic_data")
    make_dataset(40, seed=2, out_dir=root, bae_subjects=40, workers=4)
    dataset = LongitudinalDataset(root)
    ids = dataset.split("bae")
    result = train_bae(dataset.samples_for(ids[8:]), seed=0, val_dataset=dataset.samples_for(ids[:8]))
    return result, dataset


@pytest.mark.slow
def test_trained_critic_recovers_phantom_age(phantom_critic):
    result, _ = phantom_critic
    assert result.clean_mae < 3.0
    assert result.noisy_mae <= 1.5 * result.clean_mae


@pytest.mark.slow
def test_trained_critic_ranks_test_subjects_by_age(phantom_critic):
    result, dataset = phantom_critic
    samples = dataset.age_samples("test")
    with no_grad():
        predicted = [predict_age(result.model, Tensor(img)).item() for img, _ in samples]
    assert spearmanr(predicted, [age for _, age in samples]).statistic > 0.8


@pytest.mark.slow
def test_trained_critic_loss_has_image_gradient(phantom_critic):
    result, dataset = phantom_critic
    img, age = dataset.age_samples("test")[0]
    x = Tensor(img, requires_grad=True)
    with Tape():
        backward(bae_loss(result.model, x, age + 5.0))
    assert x.grad is not None and np.any(x.grad != 0)
