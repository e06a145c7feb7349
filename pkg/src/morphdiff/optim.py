import logging

import numpy as np

from .errors import CheckpointError
from .nn import Parameter

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay over a list of named parameters."""

    def __init__(
        self,
        named_params: list[tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = [(name, p) for name, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bias1 = 1 - self.beta1**self.step_count
        bias2 = 1 - self.beta2**self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            grad = p.grad.astype(p.data.dtype)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, _ in self.params:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params:
            for key, target in ((f"m.{name}", self.m), (f"v.{name}", self.v)):
                if key not in state:
                    raise CheckpointError(f"optimizer state is missing {key}")
                if state[key].shape != p.shape:
                    raise CheckpointError(f"optimizer state {key} has shape {state[key].shape}, expected {p.shape}")
                target[name] = np.asarray(state[key], dtype=p.data.dtype).copy()
        self.step_count = step_count
        logger.debug(f"Restored optimizer state at step {step_count}")
