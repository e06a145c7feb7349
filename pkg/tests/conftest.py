import numpy as np
import pytest

from src.morphdiff.config import ModelSpec, RunConfig
from src.morphdiff.synthdata import LongitudinalDataset, make_dataset

TINY_SIZE = 16


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(base_width=4, emb_dim=8, feat_dim=4, guidance_dim=8, max_aux=2, T=10, kan_grid_size=3)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Ten 16×16 subjects plus the default five critic subjects, written once per session."""
    root = tmp_path_factory.mktemp("dataset")
    make_dataset(10, seed=3, out_dir=root, workers=2, size=TINY_SIZE)
    return root


@pytest.fixture
def tiny_dataset(tiny_dataset_dir) -> LongitudinalDataset:
    return LongitudinalDataset(tiny_dataset_dir)


@pytest.fixture
def tiny_config(tmp_path, tiny_dataset_dir) -> RunConfig:
    return RunConfig(
        dataset_dir=tiny_dataset_dir,
        checkpoint_path=tmp_path / "run",
        T=10,
        base_width=4,
        emb_dim=8,
        feat_dim=4,
        guidance_dim=8,
        max_aux=2,
        kan_grid_size=3,
        epochs=2,
        batch_size=4,
        checkpoint_every=1,
        learning_rate=1e-3,
        lambda3=0.0,
    )
