"""Desk-scale experiments: KAN capacity, critic robustness to noise, and the architecture ablation."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import evaluate_split
from .main import CompletionSystem
from .models.bae import evaluate_mae, train_bae
from .models.kan import KanNetwork, SplineGrid
from .nn import Mlp
from .optim import AdamW
from .synthdata import LongitudinalDataset
from .tensor import Tape, Tensor, backward
from .training import Trainer

logger = logging.getLogger(__name__)


def fit_sine(model, steps: int = 2000, lr: float = 1e-2, num_points: int = 256) -> float:
    """Fit y = sin(pi x) on [-1, 1]; returns the final training MSE."""
    x = np.linspace(-1.0, 1.0, num_points).reshape(-1, 1)
    target = Tensor(np.sin(np.pi * x))
    inputs = Tensor(x)
    optimizer = AdamW(list(model.named_parameters()), lr=lr, weight_decay=0.0)
    mse = float("nan")
    for _ in range(steps):
        with Tape():
            loss = (model(inputs) - target).square().mean()
            optimizer.zero_grad()
            backward(loss)
        optimizer.step()
        mse = loss.item()
    return mse


@dataclass
class SineFitResult:
    seed: int
    kan_mse: float
    mlp_mse: float
    kan_params: int
    mlp_params: int


def matched_mlp_width(num_params: int, in_dim: int = 1, out_dim: int = 1) -> int:
    """Hidden width of an in->h->out MLP whose parameter count is closest to ``num_params``."""
    return max(1, round((num_params - out_dim) / (in_dim + out_dim + 1)))


def kan_vs_mlp(seed: int, steps: int = 2000, hidden: int = 8) -> SineFitResult:
    """A 1->hidden->1 KAN against a two-layer silu MLP with the same parameter count."""
    rng = np.random.default_rng(seed)
    kan = KanNetwork([1, hidden, 1], rng, SplineGrid(order=3, num_intervals=5))
    mlp = Mlp([1, matched_mlp_width(kan.num_parameters()), 1], rng)
    result = SineFitResult(
        seed=seed,
        kan_mse=fit_sine(kan, steps),
        mlp_mse=fit_sine(mlp, steps),
        kan_params=kan.num_parameters(),
        mlp_params=mlp.num_parameters(),
    )
    logger.info(
        f"seed {seed}: KAN MSE {result.kan_mse:.2e} ({result.kan_params} params), "
        f"MLP MSE {result.mlp_mse:.2e} ({result.mlp_params} params)"
    )
    return result


@dataclass
class RobustnessResult:
    seed: int
    augmented_clean: float
    augmented_noisy: float
    plain_clean: float
    plain_noisy: float

    @property
    def augmented_ratio(self) -> float:
        return self.augmented_noisy / self.augmented_clean

    @property
    def plain_ratio(self) -> float:
        return self.plain_noisy / self.plain_clean


def bae_robustness(
    train_samples: list[tuple[np.ndarray, float]],
    val_samples: list[tuple[np.ndarray, float]],
    seeds: list[int],
    noise_levels: tuple[float, ...] = (0.05, 0.1, 0.2),
    epochs: int = 30,
    sigma: float = 0.1,
) -> list[RobustnessResult]:
    """Noise-augmented against clean-only critic training: MAE degradation under noise of ``sigma``."""
    results = []
    for seed in seeds:
        augmented = train_bae(train_samples, noise_levels, epochs=epochs, seed=seed, val_dataset=val_samples).model
        plain = train_bae(train_samples, (), epochs=epochs, seed=seed, val_dataset=val_samples).model
        row = RobustnessResult(
            seed=seed,
            augmented_clean=evaluate_mae(augmented, val_samples, 0.0, seed),
            augmented_noisy=evaluate_mae(augmented, val_samples, sigma, seed),
            plain_clean=evaluate_mae(plain, val_samples, 0.0, seed),
            plain_noisy=evaluate_mae(plain, val_samples, sigma, seed),
        )
        logger.info(
            f"seed {seed}: augmented critic x{row.augmented_ratio:.2f} under noise, clean-trained x{row.plain_ratio:.2f}"
        )
        results.append(row)
    return results


@dataclass
class AblationRow:
    seed: int
    variant: str
    psnr_db: float
    ssim: float
    baseline_psnr_db: float


# conv U-Net without guidance, each component alone, then both
ABLATION_VARIANTS = {
    "baseline": {"use_kan": False, "use_ftie": False},
    "kan": {"use_kan": True, "use_ftie": False},
    "ftie": {"use_kan": False, "use_ftie": True},
    "full": {"use_kan": True, "use_ftie": True},
}


def run_ablation(
    config: RunConfig,
    seeds: list[int],
    out_dir: str | Path,
    bae=None,
    split: str = "test",
    workers: int = 4,
) -> list[AblationRow]:
    """Train and evaluate every variant for every seed under ``out_dir/<variant>/seed_<k>``."""
    dataset = LongitudinalDataset(config.dataset_dir, config.u_max, config.age_min, config.age_max)
    train_tasks = dataset.tasks("train", config.max_aux)
    rows = []
    for seed in seeds:
        for variant, flags in ABLATION_VARIANTS.items():
            run_dir = Path(out_dir) / variant / f"seed_{seed}"
            run_config = config.model_copy(update={**flags, "seed": seed, "checkpoint_path": run_dir})
            Trainer(run_config, bae=bae, tasks=train_tasks).fit()
            with CompletionSystem(run_dir / "last.dfck") as system:
                report = evaluate_split(
                    dataset,
                    split,
                    lambda task, s: system.complete_task(task, s).field,
                    num_aux=config.max_aux,
                    seed=seed,
                    workers=workers,
                )
            rows.append(
                AblationRow(
                    seed=seed,
                    variant=variant,
                    psnr_db=report.aggregate["psnr_db"][0],
                    ssim=report.aggregate["ssim"][0],
                    baseline_psnr_db=report.aggregate["baseline_psnr_db"][0],
                )
            )
            logger.info(f"ablation seed {seed} {variant}: PSNR {rows[-1].psnr_db:.2f} dB")
    return rows
