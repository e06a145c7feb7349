import numpy as np
import pytest

from src.morphdiff.checkpoint import load_model
from src.morphdiff.errors import DatasetError
from src.morphdiff.models.bae import BaeModel
from src.morphdiff.serialization import read_checkpoint
from src.morphdiff.state import parse_loss_log
from src.morphdiff.training import LOSS_LOG_NAME, Trainer


@pytest.fixture
def train_tasks(tiny_dataset):
    return tiny_dataset.tasks("train", num_aux=2)[:6]


def test_one_epoch_writes_loadable_checkpoints(tiny_config, train_tasks):
    result = Trainer(tiny_config, tasks=train_tasks).fit(epochs=1)
    run_dir = tiny_config.checkpoint_path
    assert (run_dir / "last.dfck").is_file()
    assert (run_dir / "epoch_0001.dfck").is_file()

    ckpt = read_checkpoint(run_dir / "last.dfck")
    assert ckpt.header.epoch == 1
    assert ckpt.header.optimizer_step == 2
    assert ckpt.header.metadata["lambdas"] == "1.0,0.5,0.0"
    restored = load_model(ckpt, tiny_config.model_spec).state_dict()
    for name, value in result.model.state_dict().items():
        np.testing.assert_array_equal(restored[name], value)


def test_loss_log_totals_are_weighted_sums(tiny_config, train_tasks):
    Trainer(tiny_config, tasks=train_tasks).fit()
    rows = parse_loss_log((tiny_config.checkpoint_path / LOSS_LOG_NAME).read_text())
    assert [row["epoch"] for row in rows] == [1, 2]
    w = tiny_config.loss_weights
    for row in rows:
        expected = w.lambda1 * row["l_simple"] + w.lambda2 * row["l_df"] + w.lambda3 * row["l_bae"]
        assert row["total"] == pytest.approx(expected, rel=1e-5, abs=1e-6)
        assert row["l_bae"] == 0.0


def test_critic_weights_are_untouched_by_diffusion_training(tiny_config, train_tasks):
    critic = BaeModel(np.random.default_rng(4), width=2)
    before = {name: value.tobytes() for name, value in critic.state_dict().items()}
    config = tiny_config.model_copy(update={"lambda3": 0.1})
    result = Trainer(config, bae=critic, tasks=train_tasks).fit(1)

    assert critic.frozen
    assert result.state["history"][0]["l_bae"] > 0
    assert {name: value.tobytes() for name, value in critic.state_dict().items()} == before
    assert all(p.grad is None for p in critic.parameters())


def test_resume_matches_uninterrupted_run(tmp_path, tiny_config, train_tasks):
    straight = Trainer(tiny_config.model_copy(update={"checkpoint_path": tmp_path / "a"}), tasks=train_tasks).fit(2)

    split_config = tiny_config.model_copy(update={"checkpoint_path": tmp_path / "b"})
    Trainer(split_config, tasks=train_tasks).fit(1)
    resumed = Trainer(split_config, tasks=train_tasks).fit(2)

    assert resumed.state["epoch"] == 2
    assert len(resumed.state["history"]) == 2
    a, b = straight.model.state_dict(), resumed.model.state_dict()
    for name in a:
        np.testing.assert_allclose(b[name], a[name], atol=1e-4)
    for x, y in zip(straight.state["history"], resumed.state["history"]):
        assert y["total"] == pytest.approx(x["total"], abs=1e-4)


def test_finished_run_does_not_train_again(tiny_config, train_tasks):
    Trainer(tiny_config, tasks=train_tasks).fit(1)
    before = (tiny_config.checkpoint_path / "last.dfck").read_bytes()
    result = Trainer(tiny_config, tasks=train_tasks).fit(1)
    assert result.state["epoch"] == 1
    assert (tiny_config.checkpoint_path / "last.dfck").read_bytes() == before


def test_no_training_pairs(tiny_config):
    with pytest.raises(DatasetError, match="no subject pairs"):
        Trainer(tiny_config, tasks=[])


def test_needs_dataset_or_tasks(tiny_config):
    with pytest.raises(ValueError, match="dataset"):
        Trainer(tiny_config)


def test_trains_from_dataset_split(tiny_config, tiny_dataset):
    trainer = Trainer(tiny_config, dataset=tiny_dataset)
    assert len(trainer.tasks) == len(tiny_dataset.tasks("train", num_aux=2))
