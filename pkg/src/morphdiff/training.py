"""Epoch loop for the diffusion network: AdamW steps, loss log, periodic checkpoints, resume."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointManager, build_checkpoint, load_model, restore_optimizer
from .config import RunConfig
from .diffusion import make_schedule, training_loss
from .errors import CheckpointError, DatasetError, NumericalError
from .models.bae import BaeModel
from .models.diffcom import DiffCom, build_model
from .optim import AdamW
from .serialization import restore_rng
from .state import TrainingState, create_initial_state, loss_log_lines, parse_loss_log, record_epoch
from .synthdata import LongitudinalDataset, Task
from .tensor import Tape, backward

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.csv"


@dataclass
class TrainingResult:
    model: DiffCom
    state: TrainingState
    run_dir: Path


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        dataset: LongitudinalDataset | None = None,
        bae: BaeModel | None = None,
        tasks: list[Task] | None = None,
    ):
        self.config = config
        self.spec = config.model_spec
        self.weights = config.loss_weights
        self.schedule = make_schedule(config.T, config.beta_start, config.beta_end)
        if tasks is None:
            if dataset is None:
                raise ValueError("Trainer needs a dataset or an explicit task list")
            tasks = dataset.tasks("train", config.max_aux)
        if not tasks:
            raise DatasetError("the training split has no subject pairs")
        self.tasks = tasks
        if bae is not None and not bae.frozen:
            logger.info("Freezing the age critic before diffusion training")
            bae.freeze()
        self.bae = bae
        if bae is None and config.lambda3 > 0:
            logger.warning("No age critic supplied; L_BAE is skipped")
        self.manager = CheckpointManager(config.checkpoint_path, self.spec)

    @property
    def loss_log_path(self) -> Path:
        return Path(self.config.checkpoint_path) / LOSS_LOG_NAME

    def _make_optimizer(self, model: DiffCom) -> AdamW:
        return AdamW(
            list(model.named_parameters()), lr=self.config.learning_rate, weight_decay=self.config.weight_decay
        )

    def _restore(self):
        ckpt = self.manager.initialize()
        if ckpt is None:
            model = build_model(self.spec, self.config.seed)
            return model, self._make_optimizer(model), np.random.default_rng(self.config.seed), create_initial_state(self.config.seed)

        model = load_model(ckpt, self.spec)
        optimizer = self._make_optimizer(model)
        restore_optimizer(optimizer, ckpt)
        if ckpt.header.rng_state is None:
            raise CheckpointError(f"{self.manager.last_path} has no RNG state; cannot continue deterministically")
        rng = restore_rng(ckpt.header.rng_state)

        epoch = ckpt.header.epoch
        history = parse_loss_log(self.loss_log_path.read_text())[:epoch] if self.loss_log_path.is_file() else []
        if len(history) != epoch:
            logger.warning(f"Loss log holds {len(history)} rows for a checkpoint at epoch {epoch}")
        state = {**create_initial_state(self.config.seed, history), "epoch": epoch}
        return model, optimizer, rng, state

    def _run_epoch(self, model: DiffCom, optimizer: AdamW, rng: np.random.Generator) -> tuple[dict[str, float], int]:
        order = rng.permutation(len(self.tasks))
        sums = {"l_simple": 0.0, "l_df": 0.0, "l_bae": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(order), self.config.batch_size):
            batch = [self.tasks[i] for i in order[start : start + self.config.batch_size]]
            with Tape():
                breakdown = training_loss(
                    batch, model, self.bae, self.schedule, self.weights, rng, u_max=self.spec.u_max
                )
                optimizer.zero_grad()
                backward(breakdown.total)
            optimizer.step()
            steps += 1
            for key, value in breakdown.as_dict().items():
                sums[key] += value * len(batch)
        return {key: value / len(self.tasks) for key, value in sums.items()}, steps

    def _write_loss_log(self, state: TrainingState) -> None:
        self.loss_log_path.parent.mkdir(parents=True, exist_ok=True)
        self.loss_log_path.write_text("\n".join(loss_log_lines(state)) + "\n")

    def fit(self, epochs: int | None = None) -> TrainingResult:
        """Train up to ``epochs`` total epochs, continuing from ``last.dfck`` when present."""
        epochs = epochs or self.config.epochs
        model, optimizer, rng, state = self._restore()
        logger.info(
            f"Training on {len(self.tasks)} pairs from epoch {state['epoch']} to {epochs} "
            f"(T={self.schedule.T}, batch {self.config.batch_size})"
        )
        metadata = {
            "seed": self.config.seed,
            "dataset_dir": self.config.dataset_dir,
            "lambdas": f"{self.weights.lambda1},{self.weights.lambda2},{self.weights.lambda3}",
            "gamma": self.weights.gamma,
        }

        for epoch in range(state["epoch"], epochs):
            try:
                losses, steps = self._run_epoch(model, optimizer, rng)
            except NumericalError as e:
                logger.error(f"Aborting at epoch {epoch + 1}: {e}; keeping {self.manager.last_path}")
                raise
            state = record_epoch(state, losses, steps)
            logger.info(
                f"epoch {epoch + 1}/{epochs}: L_simple {losses['l_simple']:.5f}, L_DF {losses['l_df']:.5f}, "
                f"L_BAE {losses['l_bae']:.5f}, total {losses['total']:.5f}"
            )
            self._write_loss_log(state)
            periodic = (epoch + 1) % self.config.checkpoint_every == 0 or epoch + 1 == epochs
            self.manager.save(
                build_checkpoint(model, optimizer, epoch + 1, rng, bae=self.bae, metadata=metadata), periodic=periodic
            )

        return TrainingResult(model=model, state=state, run_dir=Path(self.config.checkpoint_path))
