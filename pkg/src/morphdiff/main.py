import logging
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_bae, load_model
from .diffusion import make_schedule, sample_field
from .models.bae import BaeModel
from .serialization import read_checkpoint
from .synthdata import Task
from .tensor import Tensor, no_grad
from .warp import DeformationField, denormalize_field, warp_image, warp_segmentation

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )


@dataclass
class CompletionResult:
    image: Tensor
    field: DeformationField
    field_px: DeformationField
    segmentation: Tensor | None = None


class CompletionSystem:
    """Loads a trained checkpoint once and completes missing timepoints from it."""

    def __init__(self, checkpoint_path: str | Path, sampling_steps: int | None = None):
        self.checkpoint_path = Path(checkpoint_path)
        self.sampling_steps = sampling_steps
        self.model = None
        self.schedule = None
        self.bae: BaeModel | None = None
        self._initialize()

    def _initialize(self):
        try:
            ckpt = read_checkpoint(self.checkpoint_path)
            self.model = load_model(ckpt).freeze()
            spec = self.model.spec
            self.schedule = make_schedule(self.sampling_steps or spec.T, spec.beta_start, spec.beta_end)
            if ckpt.header.critic is not None:
                self.bae = load_bae(ckpt)
            logger.info(f"CompletionSystem loaded {self.checkpoint_path} (epoch {ckpt.header.epoch})")
        except Exception as e:
            logger.error(f"Failed to load {self.checkpoint_path}: {e}")
            raise

    @property
    def spec(self):
        return self.model.spec

    def close(self):
        self.model = None
        self.schedule = None
        self.bae = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def normalized_age(self, target_age: float) -> float:
        spec = self.spec
        value = (target_age - spec.age_min) / (spec.age_max - spec.age_min)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"target age {target_age} outside [{spec.age_min}, {spec.age_max}]")
        return value

    def complete(
        self,
        source: Tensor,
        target_age: float,
        aux: list[Tensor] | None = None,
        seed: int = 0,
        seg: Tensor | None = None,
    ) -> CompletionResult:
        if self.model is None:
            raise RuntimeError("CompletionSystem is closed")
        aux = list(aux or [])
        with no_grad():
            c2 = self.model.guidance(aux)
        field = sample_field(
            self.model, source, self.normalized_age(target_age), c2, self.schedule, seed, u_max=self.spec.u_max
        )
        field_px = denormalize_field(field, self.spec.u_max)
        return CompletionResult(
            image=warp_image(source, field_px),
            field=field,
            field_px=field_px,
            segmentation=warp_segmentation(seg, field_px) if seg is not None else None,
        )

    def complete_task(self, task: Task, seed: int = 0) -> CompletionResult:
        return self.complete(task.c1, task.t_age, task.aux_images, seed, task.source_seg)


def complete_image(checkpoint_path: str | Path, source: Tensor, target_age: float, **kwargs) -> CompletionResult:
    with CompletionSystem(checkpoint_path) as system:
        return system.complete(source, target_age, **kwargs)
