"""Brain-age critic: a small CNN regressor, pre-trained with noise augmentation, then frozen."""
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError, ShapeError
from ..functional import resample2x
from ..nn import Conv2d, Linear, Module
from ..optim import AdamW
from ..tensor import Tape, Tensor, backward, no_grad, stack_sum

logger = logging.getLogger(__name__)

DEFAULT_NOISE_LEVELS = (0.05, 0.1, 0.2)


class BaeModel(Module):
    def __init__(self, rng: np.random.Generator, width: int = 8, age_min: float = 40.0, age_max: float = 90.0):
        self.width = width
        self.age_center = 0.5 * (age_min + age_max)
        self.age_half_range = 0.5 * (age_max - age_min)
        self.conv1 = Conv2d(1, width, rng)
        self.conv2 = Conv2d(width, 2 * width, rng)
        self.conv3 = Conv2d(2 * width, 4 * width, rng)
        self.head = Linear(4 * width, 1, rng)

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 3 or img.shape[0] != 1:
            raise ShapeError(f"age critic expects a 1×H×W image, got {img.shape}")
        h = img
        for conv in (self.conv1, self.conv2, self.conv3):
            h = resample2x(conv(h).silu(), "down")
        y = self.head(h.mean(axis=(1, 2)))
        return (y * self.age_half_range + self.age_center).reshape(())


def predict_age(model: BaeModel, img: Tensor) -> Tensor:
    return model(img)


@dataclass
class BaeTrainingResult:
    model: BaeModel
    clean_mae: float
    noisy_mae: float
    history: list[float]


def _corrupt(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return img
    return img + rng.normal(0.0, sigma, size=img.shape)


def evaluate_mae(
    model: BaeModel, dataset: list[tuple[np.ndarray, float]], sigma: float = 0.0, seed: int = 0
) -> float:
    rng = np.random.default_rng(seed)
    errors = []
    with no_grad():
        for img, age in dataset:
            pred = model(Tensor(_corrupt(img, sigma, rng))).item()
            errors.append(abs(pred - age))
    return float(np.mean(errors))


def train_bae(
    dataset: list[tuple[np.ndarray, float]],
    noise_levels: tuple[float, ...] = DEFAULT_NOISE_LEVELS,
    epochs: int = 30,
    seed: int = 0,
    val_dataset: list[tuple[np.ndarray, float]] | None = None,
    lr: float = 1e-3,
    batch_size: int = 8,
    age_min: float = 40.0,
    age_max: float = 90.0,
    width: int = 8,
) -> BaeTrainingResult:
    """Fit the critic with L1 loss; each sample gets sigma drawn from noise_levels plus 0.

    Returns the frozen model with clean and sigma=0.1 MAE on ``val_dataset``
    (or on the training pairs when no validation set is given).
    """
    if not dataset:
        raise DatasetError("cannot train the age critic on an empty dataset")
    rng = np.random.default_rng(seed)
    model = BaeModel(rng, width=width, age_min=age_min, age_max=age_max)
    optimizer = AdamW(list(model.named_parameters()), lr=lr, weight_decay=0.0)
    levels = sorted(set(noise_levels) | {0.0})
    logger.info(f"Training age critic on {len(dataset)} images, noise levels {levels}, {epochs} epochs")

    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            with Tape():
                losses = []
                for idx in batch:
                    img, age = dataset[idx]
                    sigma = levels[rng.integers(len(levels))]
                    pred = model(Tensor(_corrupt(img, sigma, rng)))
                    losses.append((pred - float(age)).abs())
                loss = stack_sum(losses) * (1.0 / len(batch))
                optimizer.zero_grad()
                backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        history.append(epoch_loss / len(dataset))
        logger.info(f"critic epoch {epoch + 1}/{epochs}: L1 {history[-1]:.3f} yr")

    model.freeze()
    holdout = val_dataset or dataset
    clean = evaluate_mae(model, holdout, 0.0, seed)
    noisy = evaluate_mae(model, holdout, 0.1, seed)
    logger.info(f"Age critic validation MAE: clean {clean:.2f} yr, sigma=0.1 {noisy:.2f} yr")
    return BaeTrainingResult(model=model, clean_mae=clean, noisy_mae=noisy, history=history)
