"""
Configuration for the AUIF toolkit.

Two layers:

* ``Settings`` - process-wide knobs read from the environment (and ``.env``),
  e.g. log level, worker cap, optional experiment tracking.
* ``TrainConfig`` / ``RunConfig`` - the training run description, read from a
  plain ``key = value`` file and echoed back verbatim next to the checkpoint.
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from auif.core.errors import ConfigError
from auif.core.network import Ablation


class Settings(BaseSettings):
    """
    Centralized process settings using Pydantic.

    Settings are loaded from environment variables. Every field has a default,
    so the toolkit runs without any environment configured.
    """

    # --- Logging ---
    LOG_LEVEL: str = Field("INFO")
    LOG_DIR: str = Field("logs")
    LOG_TO_FILE: bool = Field(True)

    # --- Parallelism ---
    AUIF_THREADS: int = Field(1, ge=1)

    # --- Monitoring ---
    WANDB_ENABLED: bool = Field(False)
    WANDB_API_KEY: Optional[str] = Field(None)
    WANDB_PROJECT: str = Field("auif-fusion")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# Create a single, importable instance of the settings
settings = Settings()


class TrainConfig(BaseModel):
    """Training hyperparameters; defaults reproduce the published regime."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    epochs: int = Field(80, ge=1)
    batch_size: int = Field(32, ge=1)
    crop: int = Field(128, ge=4)
    mu: float = Field(5.0, ge=0.0)
    l2_weight: float = Field(1.0, ge=0.0)
    l2_normalization: Literal["mean", "sum"] = "mean"
    lr_phase1: float = Field(1e-2, ge=0.0)
    lr_phase2: float = Field(1e-3, ge=0.0)
    phase_split: int = Field(40, ge=0)
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    layers: int = Field(10, ge=1)
    channels: int = Field(64, ge=1)
    ablation: List[str] = Field(default_factory=list)

    @field_validator("ablation", mode="before")
    @classmethod
    def parse_ablation(cls, v):
        if v is None:
            return []
        if isinstance(v, str):
            return [name.strip() for name in v.split(",") if name.strip() and name.strip() != "none"]
        return list(v)

    @field_validator("ablation")
    @classmethod
    def check_ablation(cls, v):
        Ablation.from_names(v)
        return v

    @field_validator("grad_clip", "steps_per_epoch", mode="before")
    @classmethod
    def parse_optional(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return v

    @property
    def ablation_flags(self) -> Ablation:
        return Ablation.from_names(self.ablation)


class RunConfig(TrainConfig):
    """A ``train`` invocation: hyperparameters plus data paths and fusion choice."""

    data_ir: Optional[str] = None
    data_vis: Optional[str] = None
    out: str = "model.auif"
    strategy: Literal["addition", "average", "l1att"] = "addition"
    avg_weight: float = Field(0.5, ge=0.0, le=1.0)

    @field_validator("data_ir", "data_vis", mode="before")
    @classmethod
    def parse_optional_path(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return v


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse ``key = value`` lines into a validated ``RunConfig``.

    Args:
        text: File contents. ``#`` starts a comment; blank lines are skipped.
        source: Name used in error messages.

    Returns:
        The validated configuration.

    Raises:
        ConfigError: malformed line, duplicate key, unknown key or bad value.
    """
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return build_run_config(raw, source=source)


def build_run_config(values: Dict[str, Any], source: str = "<config>") -> RunConfig:
    """Validate a mapping into a ``RunConfig``, wrapping pydantic errors."""
    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{source}: {problems}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a run configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_config_text(text, source=str(path))


def echo_config(cfg: BaseModel) -> str:
    """Render the effective configuration as ``key = value`` lines in field order."""
    lines = [f"{name} = {_format_value(getattr(cfg, name))}" for name in type(cfg).model_fields]
    return "\n".join(lines) + "\n"


def write_config_echo(cfg: Union[BaseModel, str], path: Union[str, Path]) -> Path:
    """Write ``echo_config(cfg)``, or an echo rendered earlier, to ``path`` and return it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg if isinstance(cfg, str) else echo_config(cfg), encoding="utf-8")
    return path
