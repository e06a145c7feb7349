from pathlib import Path

import pytest

from src.morphdiff.config import ConfigError, LossWeights, ModelSpec, RunConfig, load_run_config


def test_defaults():
    config = RunConfig()
    assert config.T == 1000
    assert config.loss_weights == LossWeights(lambda1=1.0, lambda2=0.5, lambda3=0.1, gamma=0.01)
    assert config.model_spec == ModelSpec()


def test_file_values(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# comment\nT = 50\nlambda2 = 0.25\nuse_kan = false\nbae_noise_levels = 0.1,0.3\n")
    config = load_run_config(path)
    assert config.T == 50
    assert config.loss_weights.lambda2 == 0.25
    assert not config.model_spec.use_kan
    assert config.bae_noise_levels == [0.1, 0.3]


def test_environment_fills_missing_keys(tmp_path, monkeypatch):
    path = tmp_path / "run.env"
    path.write_text("T = 50\n")
    monkeypatch.setenv("MORPHDIFF_EPOCHS", "7")
    monkeypatch.setenv("MORPHDIFF_T", "99")
    config = load_run_config(path)
    assert config.epochs == 7
    assert config.T == 50


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("epochs = 3\n")
    assert load_run_config(path, epochs=9, seed=None).epochs == 9


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "absent.env")


def test_unknown_key(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("epochz = 3\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_run_config(path)


@pytest.mark.parametrize(
    "values",
    [
        {"beta_start": 0.1, "beta_end": 0.01},
        {"age_min": 90, "age_max": 40},
        {"base_width": 5},
        {"learning_rate": 0},
        {"T": 0},
        {"lambda2": -1},
    ],
)
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        load_run_config(**values)


def test_check_paths(tmp_path):
    config = RunConfig(dataset_dir=tmp_path)
    config.check_paths()
    with pytest.raises(FileNotFoundError, match="bae_checkpoint"):
        RunConfig(bae_checkpoint=tmp_path / "none.dfck").check_paths("bae_checkpoint")
    assert RunConfig(bae_checkpoint="").bae_checkpoint is None
    assert isinstance(config.dataset_dir, Path)


def test_environment_is_read_when_loading(monkeypatch):
    monkeypatch.setenv("MORPHDIFF_SEED", "42")
    assert load_run_config().seed == 42
    monkeypatch.delenv("MORPHDIFF_SEED")
    assert load_run_config().seed == RunConfig.model_fields["seed"].default
