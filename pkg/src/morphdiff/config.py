from pathlib import Path

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ModelSpec(BaseModel):
    """Everything needed to rebuild a network and run it; stored in checkpoint headers."""

    base_width: int = 32
    emb_dim: int = 64
    feat_dim: int = 32
    guidance_dim: int = 64
    max_aux: int = 3
    use_kan: bool = True
    use_ftie: bool = True
    kan_grid_size: int = 5
    kan_order: int = 3
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    u_max: float = 10.0
    age_min: float = 40.0
    age_max: float = 90.0


class LossWeights(BaseModel):
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.5, ge=0)
    lambda3: float = Field(0.1, ge=0)
    gamma: float = Field(0.01, ge=0)


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MORPHDIFF_", env_file=".env", extra="ignore")

    # Data
    dataset_dir: Path = Path("data")
    age_min: float = 40.0
    age_max: float = 90.0
    u_max: float = Field(10.0, gt=0)

    # Diffusion
    T: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # Loss weights
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.5, ge=0)
    lambda3: float = Field(0.1, ge=0)
    gamma: float = Field(0.01, ge=0)

    # Architecture
    max_aux: int = Field(3, ge=1)
    base_width: int = Field(32, ge=2)
    emb_dim: int = 64
    feat_dim: int = 32
    guidance_dim: int = 64
    kan_grid_size: int = 5
    kan_order: int = 3
    use_kan: bool = True
    use_ftie: bool = True

    # Optimisation
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(4, ge=1)
    checkpoint_every: int = Field(5, ge=1)

    # Run
    seed: int = 0
    checkpoint_path: Path = Path("runs/diffcom")
    bae_checkpoint: Path | None = None

    # Age critic
    bae_epochs: int = Field(30, ge=1)
    bae_learning_rate: float = Field(1e-3, gt=0)
    bae_noise_levels: list[float] = [0.05, 0.1, 0.2]

    @field_validator("bae_noise_levels", mode="before")
    @classmethod
    def _split_levels(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("bae_checkpoint", mode="before")
    @classmethod
    def _empty_path(cls, value):
        return None if value in ("", None) else value

    @model_validator(mode="after")
    def _check_ranges(self):
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if not self.age_min < self.age_max:
            raise ValueError(f"age_min {self.age_min} must be below age_max {self.age_max}")
        if self.base_width % 2 or self.emb_dim % 2:
            raise ValueError("base_width and emb_dim must be even")
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2, lambda3=self.lambda3, gamma=self.gamma)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(**{name: getattr(self, name) for name in ModelSpec.model_fields})

    def check_paths(self, *paths: str) -> None:
        """Raise FileNotFoundError for any named path field that does not exist."""
        for name in paths or ("dataset_dir",):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"{name} = {value} does not exist")


class ConfigError(ValueError):
    pass


def load_run_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a flat ``key = value`` file (``#`` comments allowed) into a RunConfig.

    Environment variables with the MORPHDIFF_ prefix fill in keys the file omits.
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        unknown = sorted(set(values) - set(RunConfig.model_fields))
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
