import numpy as np
import pytest
from click.testing import CliRunner

from src.morphdiff import tensor
from src.morphdiff.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, cli
from src.morphdiff.serialization import read_checkpoint, read_metadata, read_tensor


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path, tiny_dataset_dir):
    path = tmp_path / "run.env"
    path.write_text(
        "\n".join(
            [
                "# tiny run",
                f"dataset_dir = {tiny_dataset_dir}",
                f"checkpoint_path = {tmp_path / 'run'}",
                "T = 10",
                "base_width = 4",
                "emb_dim = 8",
                "feat_dim = 4",
                "guidance_dim = 8",
                "max_aux = 2",
                "kan_grid_size = 3",
                "epochs = 1",
                "batch_size = 8",
                "lambda3 = 0",
                "bae_epochs = 1",
            ]
        )
        + "\n"
    )
    return path


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_reproducible(runner, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(cli, ["gen-data", "--subjects", "10", "--seed", "7", "--out", str(tmp_path / name)])
        assert result.exit_code == EXIT_OK, result.output
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)
    assert (tmp_path / "a" / "train.txt").read_text().count("\n") == 7


def test_gen_data_with_too_few_subjects(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--subjects", "2", "--out", str(tmp_path / "d")])
    assert result.exit_code == EXIT_IO
    assert "too few subjects" in result.output


def test_train_then_sample(runner, tmp_path, config_file, tiny_dataset, tiny_dataset_dir):
    result = runner.invoke(cli, ["train", "--config", str(config_file)])
    assert result.exit_code == EXIT_OK, result.output
    checkpoint = tmp_path / "run" / "last.dfck"
    assert read_checkpoint(checkpoint).header.epoch == 1

    subject_id = tiny_dataset.split("test")[0]
    folder = tiny_dataset_dir / "subjects" / subject_id
    args = [
        "sample",
        "--checkpoint", str(checkpoint),
        "--source", str(folder / "t0_img.dftn"),
        "--seg", str(folder / "t0_seg.dftn"),
        "--target-age", str(tiny_dataset.subject(subject_id).ages[-1]),
        "--seed", "3",
        "--out", str(tmp_path / "out"),
        "--preview",
    ]  # fmt: skip
    result = runner.invoke(cli, args)
    assert result.exit_code == EXIT_OK, result.output
    image = read_tensor(tmp_path / "out" / "image.dftn")
    assert image.shape == (1, 16, 16)
    assert np.abs(read_tensor(tmp_path / "out" / "field_norm.dftn")).max() <= 1.0
    assert read_metadata(tmp_path / "out" / "image.meta")["seed"] == "3"
    assert (tmp_path / "out" / "image.png").is_file()
    assert set(np.unique(read_tensor(tmp_path / "out" / "seg.dftn"))) <= {0.0, 1.0, 2.0}

    too_many = args[:-3] + ["--out", str(tmp_path / "out2")]
    for _ in range(3):
        too_many += ["--aux", str(folder / "t0_img.dftn")]
    result = runner.invoke(cli, too_many)
    assert result.exit_code == EXIT_USAGE
    assert "N=2" in result.output


def test_train_bae_writes_critic(runner, tmp_path, config_file):
    out = tmp_path / "bae.dfck"
    result = runner.invoke(cli, ["train-bae", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == EXIT_OK, result.output
    ckpt = read_checkpoint(out)
    assert ckpt.header.critic is not None
    assert ckpt.header.metadata["val_subjects"] == "1"


def test_oracle_evaluation(runner, tmp_path, tiny_dataset_dir):
    out = tmp_path / "eval"
    result = runner.invoke(cli, ["evaluate", "--dataset", str(tiny_dataset_dir), "--oracle", "--out", str(out)])
    assert result.exit_code == EXIT_OK, result.output
    assert "psnr_db_mean = inf" in (out / "report.txt").read_text()


def test_evaluate_needs_checkpoint(runner, tmp_path, tiny_dataset_dir):
    result = runner.invoke(cli, ["evaluate", "--dataset", str(tiny_dataset_dir), "--out", str(tmp_path / "e")])
    assert result.exit_code == EXIT_USAGE
    assert "--checkpoint" in result.output


def test_gradcheck_passes(runner):
    result = runner.invoke(cli, ["gradcheck"])
    assert result.exit_code == EXIT_OK, result.output
    assert "gradient checks passed" in result.output


def test_broken_backward_fails_gradcheck(runner, monkeypatch):
    monkeypatch.setattr(tensor.Sin, "backward", lambda self, grad: (-grad * np.cos(self.a),))
    result = runner.invoke(cli, ["gradcheck"])
    assert result.exit_code == EXIT_NUMERIC
    assert "sin/sigmoid/silu" in result.output


def test_unknown_config_key(runner, tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("learning_rat = 0.1\n")
    result = runner.invoke(cli, ["train", "--config", str(path)])
    assert result.exit_code == EXIT_USAGE
    assert "learning_rat" in result.output


def test_invalid_config_value(runner, tmp_path, tiny_dataset_dir):
    path = tmp_path / "bad.env"
    path.write_text(f"dataset_dir = {tiny_dataset_dir}\nbeta_start = 0.5\nbeta_end = 0.1\n")
    result = runner.invoke(cli, ["train", "--config", str(path)])
    assert result.exit_code == EXIT_USAGE


def test_missing_dataset_is_an_io_error(runner, tmp_path):
    path = tmp_path / "run.env"
    path.write_text(f"dataset_dir = {tmp_path / 'nowhere'}\n")
    result = runner.invoke(cli, ["train", "--config", str(path)])
    assert result.exit_code == EXIT_IO
