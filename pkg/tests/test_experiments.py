import numpy as np
import pytest

from src.morphdiff.experiments import (
    ABLATION_VARIANTS,
    bae_robustness,
    fit_sine,
    kan_vs_mlp,
    matched_mlp_width,
    run_ablation,
)
from src.morphdiff.models.kan import KanNetwork, SplineGrid
from src.morphdiff.nn import Mlp
from src.morphdiff.synthdata import LongitudinalDataset, make_dataset

SEEDS = [0, 1, 2, 3, 4]


def _kan(seed, hidden=4):
    return KanNetwork([1, hidden, 1], np.random.default_rng(seed), SplineGrid(order=3, num_intervals=5))


def test_fit_sine_reduces_error():
    assert fit_sine(_kan(0), steps=50) < fit_sine(_kan(0), steps=1)


def test_matched_mlp_has_the_kan_parameter_count():
    kan = _kan(0, hidden=8)
    assert kan.num_parameters() == 160
    width = matched_mlp_width(kan.num_parameters())
    mlp = Mlp([1, width, 1], np.random.default_rng(0))
    assert width == 53
    assert mlp.num_parameters() == 160


def test_ablation_covers_every_component_combination():
    combos = {(flags["use_kan"], flags["use_ftie"]) for flags in ABLATION_VARIANTS.values()}
    assert combos == {(False, False), (True, False), (False, True), (True, True)}
    assert ABLATION_VARIANTS["full"] == {"use_kan": True, "use_ftie": True}
    assert ABLATION_VARIANTS["baseline"] == {"use_kan": False, "use_ftie": False}


@pytest.fixture(scope="module")
def sine_results():
    return [kan_vs_mlp(seed=seed) for seed in SEEDS]


@pytest.mark.slow
def test_kan_fits_sine(sine_results):
    for result in sine_results:
        assert result.kan_mse < 1e-3
        assert np.isfinite(result.mlp_mse)


@pytest.mark.slow
def test_kan_beats_parameter_matched_mlp_on_most_seeds(sine_results):
    assert all(r.kan_params == r.mlp_params for r in sine_results)
    assert sum(r.kan_mse < r.mlp_mse for r in sine_results) >= 3


@pytest.mark.slow
def test_noise_augmented_critic_degrades_less(tmp_path):
    make_dataset(40, seed=1, out_dir=tmp_path, workers=4)
    dataset = LongitudinalDataset(tmp_path)
    ids = dataset.split("bae")
    results = bae_robustness(dataset.samples_for(ids[4:]), dataset.samples_for(ids[:4]), seeds=SEEDS)
    assert all(r.augmented_ratio <= 1.5 for r in results)
    assert sum(r.augmented_ratio < r.plain_ratio for r in results) >= 3


@pytest.mark.slow
def test_ablation_smoke(tmp_path, tiny_config):
    config = tiny_config.model_copy(update={"epochs": 1, "T": 4})
    rows = run_ablation(config, [0], tmp_path / "ablation", split="val", workers=1)
    assert {r.variant for r in rows} == set(ABLATION_VARIANTS)
    for variant in ABLATION_VARIANTS:
        assert (tmp_path / "ablation" / variant / "seed_0" / "last.dfck").is_file()
    assert all(np.isfinite(r.ssim) for r in rows)
