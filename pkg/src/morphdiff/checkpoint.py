"""Saving and restoring networks, optimiser state and RNG state as DFCK checkpoints."""
import logging
from pathlib import Path

import numpy as np

from .config import ModelSpec
from .errors import CheckpointError
from .models.bae import BaeModel
from .models.diffcom import DiffCom
from .optim import AdamW
from .serialization import (
    Checkpoint,
    CheckpointHeader,
    CriticSpec,
    read_checkpoint,
    restore_rng,
    rng_state,
    write_checkpoint,
)

logger = logging.getLogger(__name__)

LAST_NAME = "last.dfck"


def _spec_mismatch(expected: ModelSpec, stored: ModelSpec) -> list[str]:
    want, have = expected.model_dump(), stored.model_dump()
    return [f"{k}: stored {have[k]!r}, requested {want[k]!r}" for k in want if want[k] != have[k]]


def build_checkpoint(
    model: DiffCom | None = None,
    optimizer: AdamW | None = None,
    epoch: int = 0,
    rng: np.random.Generator | None = None,
    bae: BaeModel | None = None,
    metadata: dict | None = None,
) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    if model is not None:
        tensors.update(model.state_dict())
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state_dict().items()})
    critic = None
    if bae is not None:
        tensors.update({f"bae.{k}": v for k, v in bae.state_dict().items()})
        critic = CriticSpec(
            width=bae.width,
            age_min=bae.age_center - bae.age_half_range,
            age_max=bae.age_center + bae.age_half_range,
        )
    header = CheckpointHeader(
        architecture=model.spec if model is not None else None,
        critic=critic,
        epoch=epoch,
        optimizer_step=optimizer.step_count if optimizer is not None else 0,
        rng_state=rng_state(rng) if rng is not None else None,
        metadata={k: str(v) for k, v in (metadata or {}).items()},
    )
    return Checkpoint(header=header, tensors=tensors)


def load_model(ckpt: Checkpoint, spec: ModelSpec | None = None) -> DiffCom:
    """Rebuild the network recorded in ``ckpt``; a differing ``spec`` is an error."""
    stored = ckpt.header.architecture
    if stored is None:
        raise CheckpointError("checkpoint holds no diffusion network")
    if spec is not None:
        diff = _spec_mismatch(spec, stored)
        if diff:
            raise CheckpointError("architecture mismatch: " + "; ".join(diff))
    model = DiffCom(stored, np.random.default_rng(0))
    state = {k: v for k, v in ckpt.tensors.items() if k.split(".", 1)[0] in ("unet", "ftie")}
    model.load_state_dict(state)
    return model


def load_bae(ckpt: Checkpoint) -> BaeModel:
    """Frozen critic from the ``bae.*`` tensors."""
    if ckpt.header.critic is None:
        raise CheckpointError("checkpoint holds no age critic")
    spec = ckpt.header.critic
    model = BaeModel(np.random.default_rng(0), width=spec.width, age_min=spec.age_min, age_max=spec.age_max)
    model.load_state_dict(ckpt.namespace("bae"))
    return model.freeze()


def load_bae_file(path: str | Path) -> BaeModel:
    return load_bae(read_checkpoint(path))


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint) -> None:
    optimizer.load_state_dict(ckpt.namespace("optim"), ckpt.header.optimizer_step)


class CheckpointManager:
    """Owns a run directory of ``epoch_XXXX.dfck`` files plus ``last.dfck``.

    ``initialize()`` returns the last checkpoint when one exists and None
    (fresh start) otherwise.
    """

    def __init__(self, run_dir: str | Path, spec: ModelSpec | None = None):
        self.run_dir = Path(run_dir)
        self.spec = spec
        self.checkpoint: Checkpoint | None = None

    @property
    def last_path(self) -> Path:
        return self.run_dir / LAST_NAME

    def epoch_path(self, epoch: int) -> Path:
        return self.run_dir / f"epoch_{epoch:04d}.dfck"

    def initialize(self) -> Checkpoint | None:
        if not self.last_path.is_file():
            logger.warning(f"No checkpoint at {self.last_path}, starting from fresh initialisation")
            self.checkpoint = None
            return None
        ckpt = read_checkpoint(self.last_path)
        if self.spec is not None and ckpt.header.architecture is not None:
            diff = _spec_mismatch(self.spec, ckpt.header.architecture)
            if diff:
                raise CheckpointError(f"{self.last_path}: architecture mismatch: " + "; ".join(diff))
        logger.info(f"Resuming from {self.last_path} at epoch {ckpt.header.epoch}")
        self.checkpoint = ckpt
        return ckpt

    def save(self, ckpt: Checkpoint, periodic: bool = False) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if periodic:
            write_checkpoint(self.epoch_path(ckpt.header.epoch), ckpt)
        write_checkpoint(self.last_path, ckpt)
        self.checkpoint = ckpt
        logger.info(f"Saved checkpoint for epoch {ckpt.header.epoch} to {self.run_dir}")
        return self.last_path

    def restore_rng(self) -> np.random.Generator | None:
        if self.checkpoint is None or self.checkpoint.header.rng_state is None:
            return None
        return restore_rng(self.checkpoint.header.rng_state)

    def close(self) -> None:
        self.checkpoint = None

    def __enter__(self):
        self.initialize()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
