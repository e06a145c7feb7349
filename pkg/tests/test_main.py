import logging

import numpy as np
import pytest

from src.morphdiff.checkpoint import build_checkpoint
from src.morphdiff.main import LOG_FORMAT, CompletionSystem, complete_image, configure_logging
from src.morphdiff.models.bae import BaeModel
from src.morphdiff.models.diffcom import build_model
from src.morphdiff.serialization import write_checkpoint
from src.morphdiff.tensor import Tensor


@pytest.fixture
def checkpoint_file(tmp_path, tiny_spec):
    path = tmp_path / "last.dfck"
    critic = BaeModel(np.random.default_rng(0), width=2)
    write_checkpoint(path, build_checkpoint(build_model(tiny_spec, seed=1), bae=critic))
    return path


def test_completion_is_deterministic_per_seed(checkpoint_file, tiny_dataset):
    task = tiny_dataset.tasks("val", num_aux=2)[0]
    with CompletionSystem(checkpoint_file) as system:
        a = system.complete_task(task, seed=5)
        b = system.complete_task(task, seed=5)
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.field.normalized and not a.field_px.normalized
    np.testing.assert_allclose(a.field_px.u.data, a.field.u.data * 10.0, rtol=1e-6)
    assert set(np.unique(a.segmentation.data)) <= {0.0, 1.0, 2.0}


def test_loads_critic_when_present(checkpoint_file):
    system = CompletionSystem(checkpoint_file, sampling_steps=4)
    assert system.bae is not None and system.bae.frozen
    assert system.schedule.T == 4
    system.close()
    with pytest.raises(RuntimeError, match="closed"):
        system.complete(None, 60.0)


def test_target_age_outside_range(checkpoint_file, rng):
    with CompletionSystem(checkpoint_file) as system:
        assert system.normalized_age(65.0) == pytest.approx(0.5)
        with pytest.raises(ValueError, match="outside"):
            system.complete(Tensor(rng.uniform(size=(1, 16, 16))), 95.0)


def test_complete_image_helper(checkpoint_file, tiny_dataset):
    task = tiny_dataset.tasks("test", num_aux=0)[0]
    result = complete_image(checkpoint_file, task.c1, task.t_age, seed=1)
    assert result.image.shape == task.c1.shape
    assert result.segmentation is None


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        CompletionSystem(tmp_path / "none.dfck")


def test_configure_logging():
    configure_logging(verbose=True)
    root = logging.getLogger()
    assert root.level == logging.DEBUG
    assert root.handlers[0].formatter._fmt == LOG_FORMAT
    configure_logging()
    assert root.level == logging.INFO
