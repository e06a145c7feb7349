"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or dataset error,
3 numerical failure (non-finite loss, NaN while sampling, failed gradient check).
"""
import logging
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image
from rich.console import Console
from rich.table import Table

from .checkpoint import build_checkpoint, load_bae_file
from .config import ConfigError, RunConfig, load_run_config
from .errors import CheckpointError, DatasetError, NumericalError
from .evaluation import evaluate_split
from .experiments import ABLATION_VARIANTS, run_ablation
from .gradcheck import run_checks
from .main import CompletionSystem, configure_logging
from .models.bae import train_bae
from .serialization import read_tensor, sidecar_path, write_checkpoint, write_metadata, write_tensor
from .synthdata import LongitudinalDataset, make_dataset
from .tensor import Tensor
from .training import Trainer

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class MorphDiffGroup(click.Group):
    """Maps library exceptions to the documented exit codes in one place."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = result if isinstance(result, int) else EXIT_OK
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        except NumericalError as e:
            click.echo(f"Numerical error: {e}", err=True)
            code = EXIT_NUMERIC
        except (OSError, DatasetError, CheckpointError) as e:
            click.echo(f"I/O error: {e}", err=True)
            code = EXIT_IO
        except (ConfigError, ValueError) as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_USAGE
        if standalone_mode:
            sys.exit(code)
        return code


def _load_config(path: Path | None, **overrides) -> RunConfig:
    config = load_run_config(path, **overrides)
    logger.debug(f"Run configuration: {config.model_dump()}")
    return config


def _read_image(path: Path) -> Tensor:
    array = read_tensor(path)
    if array.ndim == 2:
        array = array[None]
    return Tensor(array)


def _save_png(path: Path, array: np.ndarray, scale: float = 255.0) -> None:
    pixels = np.clip(np.asarray(array).reshape(array.shape[-2:]) * scale, 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


@click.group(cls=MorphDiffGroup)
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
def cli(verbose: bool):
    """Longitudinal image completion with conditional deformation-field diffusion."""
    configure_logging(verbose)


@cli.command("gen-data")
@click.option("--subjects", type=int, default=200, show_default=True, help="Subjects in train/val/test.")
@click.option("--seed", type=int, envvar="MORPHDIFF_SEED", default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--bae-subjects", type=int, default=None, help="Extra subjects for the age critic (default subjects // 2).")
@click.option("--workers", type=int, default=4, show_default=True)
def gen_data(subjects: int, seed: int, out_dir: Path, bae_subjects: int | None, workers: int):
    """Generate a synthetic longitudinal phantom dataset."""
    manifest = make_dataset(subjects, seed, out_dir=out_dir, bae_subjects=bae_subjects, workers=workers)
    table = Table(title=f"Dataset {out_dir}")
    table.add_column("split")
    table.add_column("subjects", justify="right")
    table.add_column("timepoints", justify="right")
    for name, ids in manifest.splits.items():
        timepoints = sum(manifest.subjects[i].num_timepoints for i in ids)
        table.add_row(name, str(len(ids)), str(timepoints))
    console.print(table)


@cli.command("train-bae")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
def train_bae_cmd(config_path: Path, out_path: Path | None):
    """Pre-train the age critic on the BAE split, holding out 20% of its subjects."""
    config = _load_config(config_path)
    config.check_paths("dataset_dir")
    dataset = LongitudinalDataset(config.dataset_dir, config.u_max, config.age_min, config.age_max)
    ids = dataset.split("bae")
    if len(ids) < 2:
        raise DatasetError(f"the BAE split needs at least two subjects, found {len(ids)}")
    order = np.random.default_rng(config.seed).permutation(len(ids))
    n_val = max(1, round(0.2 * len(ids)))
    val_ids = sorted(ids[i] for i in order[:n_val])
    train_ids = sorted(ids[i] for i in order[n_val:])

    result = train_bae(
        dataset.samples_for(train_ids),
        tuple(config.bae_noise_levels),
        epochs=config.bae_epochs,
        seed=config.seed,
        val_dataset=dataset.samples_for(val_ids),
        lr=config.bae_learning_rate,
        age_min=config.age_min,
        age_max=config.age_max,
    )
    out_path = out_path or config.bae_checkpoint or Path(config.checkpoint_path) / "bae.dfck"
    ckpt = build_checkpoint(
        bae=result.model,
        metadata={
            "seed": config.seed,
            "noise_levels": ",".join(str(s) for s in config.bae_noise_levels),
            "clean_mae": result.clean_mae,
            "noisy_mae_0.1": result.noisy_mae,
            "train_subjects": len(train_ids),
            "val_subjects": len(val_ids),
        },
    )
    write_checkpoint(out_path, ckpt)
    console.print(
        f"Age critic: clean MAE [bold]{result.clean_mae:.2f}[/bold] yr, "
        f"sigma=0.1 MAE [bold]{result.noisy_mae:.2f}[/bold] yr -> {out_path}"
    )


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=int, default=None, help="Override the configured number of epochs.")
def train(config_path: Path, epochs: int | None):
    """Train the diffusion network; resumes from last.dfck in the run directory."""
    config = _load_config(config_path)
    config.check_paths("dataset_dir")
    bae = None
    if config.bae_checkpoint is not None:
        config.check_paths("bae_checkpoint")
        bae = load_bae_file(config.bae_checkpoint)
    dataset = LongitudinalDataset(config.dataset_dir, config.u_max, config.age_min, config.age_max)
    result = Trainer(config, dataset, bae).fit(epochs)

    table = Table(title=f"Training {result.run_dir}")
    for column in ("epoch", "L_simple", "L_DF", "L_BAE", "total"):
        table.add_column(column, justify="right")
    for row in result.state["history"][-5:]:
        table.add_row(
            str(row["epoch"]), *(f"{row[k]:.5f}" for k in ("l_simple", "l_df", "l_bae", "total"))
        )
    console.print(table)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--source", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--target-age", type=float, required=True)
@click.option("--aux", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True)
@click.option("--seg", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--seed", type=int, envvar="MORPHDIFF_SEED", default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--preview", is_flag=True, help="Also write PNG previews.")
def sample(
    checkpoint: Path,
    source: Path,
    target_age: float,
    aux: tuple[Path, ...],
    seg: Path | None,
    seed: int,
    out_dir: Path,
    preview: bool,
):
    """Complete one missing timepoint from a source image and optional auxiliary scans."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with CompletionSystem(checkpoint) as system:
        if len(aux) > system.spec.max_aux:
            raise click.UsageError(f"at most N={system.spec.max_aux} --aux images are supported, got {len(aux)}")
        result = system.complete(
            _read_image(source),
            target_age,
            [_read_image(p) for p in aux],
            seed=seed,
            seg=_read_image(seg) if seg is not None else None,
        )
        u_max = system.spec.u_max

    outputs = {
        "field_norm.dftn": result.field.numpy(),
        "field_px.dftn": result.field_px.numpy(),
        "image.dftn": result.image.numpy(),
    }
    if result.segmentation is not None:
        outputs["seg.dftn"] = result.segmentation.numpy()
    for name, array in outputs.items():
        write_tensor(out_dir / name, array)
        write_metadata(
            sidecar_path(out_dir / name),
            {"target_age": target_age, "seed": seed, "num_aux": len(aux), "u_max": u_max},
        )
    if preview:
        _save_png(out_dir / "image.png", result.image.numpy())
        if result.segmentation is not None:
            _save_png(out_dir / "seg.png", result.segmentation.numpy(), scale=127.0)
    console.print(f"Wrote {', '.join(outputs)} to {out_dir}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--oracle", is_flag=True, help="Score the ground-truth fields instead of a model.")
@click.option("--seed", type=int, envvar="MORPHDIFF_SEED", default=0, show_default=True)
@click.option("--workers", type=int, default=4, show_default=True)
def evaluate(
    checkpoint: Path | None, dataset_dir: Path, split: str, out_dir: Path, oracle: bool, seed: int, workers: int
):
    """Score completions on every forward within-subject pair of a split."""
    if checkpoint is None and not oracle:
        raise click.UsageError("--checkpoint is required unless --oracle is given")

    if oracle:
        dataset = LongitudinalDataset(dataset_dir)
        report = evaluate_split(dataset, split, None, seed=seed, workers=workers)
    else:
        with CompletionSystem(checkpoint) as system:
            spec = system.spec
            dataset = LongitudinalDataset(dataset_dir, spec.u_max, spec.age_min, spec.age_max)
            report = evaluate_split(
                dataset,
                split,
                lambda task, s: system.complete_task(task, s).field,
                num_aux=spec.max_aux,
                seed=seed,
                workers=workers,
            )
    report.write(out_dir)

    table = Table(title=f"{split} split, {len(report.pairs)} pairs{' (oracle)' if oracle else ''}")
    table.add_column("metric")
    table.add_column("mean", justify="right")
    table.add_column("std", justify="right")
    for name, (mean, std) in report.aggregate.items():
        table.add_row(name, f"{mean:.4f}", f"{std:.4f}")
    console.print(table)
    console.print(f"PSNR uplift over identity baseline: {report.uplift_db:.2f} dB")


@cli.command()
def gradcheck():
    """Finite-difference check of every registered backward rule."""
    results = run_checks()
    table = Table(title="Gradient checks")
    table.add_column("op")
    table.add_column("rel err", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("status")
    for r in results:
        status = "[green]pass[/green]" if r.passed else f"[red]FAIL[/red] {r.detail}"
        table.add_row(r.name, f"{r.rel_error:.2e}", f"{r.tolerance:.0e}", status)
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"{len(failed)} of {len(results)} gradient checks failed: {', '.join(failed)}")
    console.print(f"All {len(results)} gradient checks passed")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--seeds", type=int, default=5, show_default=True, help="Number of seeds, starting at the configured seed.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--workers", type=int, default=4, show_default=True)
def ablate(config_path: Path, seeds: int, out_dir: Path, workers: int):
    """Train and evaluate the baseline, KAN-only, F-TIE-only and full variants."""
    config = _load_config(config_path)
    config.check_paths("dataset_dir")
    bae = load_bae_file(config.bae_checkpoint) if config.bae_checkpoint is not None else None
    rows = run_ablation(config, [config.seed + k for k in range(seeds)], out_dir, bae=bae, workers=workers)

    table = Table(title="Ablation (test PSNR, dB)")
    table.add_column("seed", justify="right")
    variants = [v for v in ABLATION_VARIANTS if any(r.variant == v for r in rows)]
    for v in variants:
        table.add_column(v, justify="right")
    by_seed: dict[int, dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, {})[r.variant] = r.psnr_db
    for seed, scores in by_seed.items():
        table.add_row(str(seed), *(f"{scores[v]:.2f}" for v in variants))
    console.print(table)
    for variant in variants[1:]:
        wins = sum(1 for scores in by_seed.values() if scores[variant] >= scores["baseline"])
        console.print(f"{variant} >= baseline on {wins} of {len(by_seed)} seeds")


if __name__ == "__main__":
    cli()
