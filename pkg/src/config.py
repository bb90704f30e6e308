"""Run configuration.

Every tunable of the pipeline lives here as a pydantic model so a run can be
reproduced from the ``config.json`` stored next to its artifacts. Values can
come from a YAML/JSON file; a few operational knobs are overridable from the
environment (``.env`` is honoured through python-dotenv):

    MW_SEED        random seed
    MW_N_JOBS      worker threads for response maps and relearning
    MW_LOG_LEVEL   logging level used by the CLI
    MW_RUNS_DIR    default parent directory for run outputs
"""
import json
import os
from enum import Enum
from pathlib import Path
from typing import Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

SCHEMA_VERSION = "mw/1"


class Measure(str, Enum):
    BACC = "bacc"
    ZNCC = "zncc"
    RMSE = "rmse"


class Strategy(str, Enum):
    GREEDY = "greedy"
    EFFICIENT = "efficient"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BatchSpec(_Model):
    """How MIDI ticks are resampled and cut into piano-roll batches."""

    batch_length_ticks: int = Field(46_080, gt=0)
    target_ticks_per_beat: int = Field(12, gt=0)
    # batch_length_ticks is expressed at this resolution (46,080 ticks = 96 beats at 480)
    reference_ticks_per_beat: int = Field(480, gt=0)
    pitch_range: tuple[int, int] = (0, 128)
    drop_percussion: bool = True

    @model_validator(mode="after")
    def _check(self):
        low, high = self.pitch_range
        if not 0 <= low < high <= 128:
            raise ValueError(f"pitch_range must satisfy 0 <= low < high <= 128, got {self.pitch_range}")
        if (self.batch_length_ticks * self.target_ticks_per_beat) % self.reference_ticks_per_beat:
            raise ValueError("batch_length_ticks must resample to a whole number of columns")
        return self

    @property
    def batch_columns(self) -> int:
        return self.batch_length_ticks * self.target_ticks_per_beat // self.reference_ticks_per_beat

    @property
    def pitch_rows(self) -> int:
        return self.pitch_range[1] - self.pitch_range[0]


class DeltaBounds(_Model):
    """Per-basis deformation bounds (inclusive, symmetric)."""

    x: int = Field(2, ge=0)
    p: int = Field(2, ge=0)
    d: int = Field(5, ge=0)


class DiffuseConfig(_Model):
    kernel_size: int = Field(5, gt=0)
    sigma: float = Field(2.0, gt=0)

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v


class EncoderConfig(_Model):
    measure: Measure = Measure.BACC
    strategy: Strategy = Strategy.EFFICIENT
    significance_s: float = Field(0.5, gt=0, le=1)
    uniqueness_u: float = Field(0.4, gt=0, le=1)
    diffuse: DiffuseConfig = DiffuseConfig()
    delta_bounds: DeltaBounds = DeltaBounds()
    scales: tuple[float, ...] = (0.5, 0.8, 1.0, 1.2, 1.4)
    flips: tuple[int, ...] = (0, 1, 2, 3)
    max_placements: int = Field(256, gt=0)
    max_template_width: Optional[int] = Field(None, gt=0)
    n_jobs: int = 1

    @field_validator("scales")
    @classmethod
    def _scales(cls, v):
        if not v or any(s <= 0 for s in v):
            raise ValueError("scales must be a non-empty grid of positive factors")
        return tuple(v)

    @field_validator("flips")
    @classmethod
    def _flips(cls, v):
        if not v or any(f not in (0, 1, 2, 3) for f in v):
            raise ValueError("flips must be a non-empty subset of {0, 1, 2, 3}")
        return tuple(v)


class StatConfig(_Model):
    xi: float = Field(6.0, gt=0)
    q_samples: int = Field(10_000, ge=1000)
    lambda_max: float = Field(10.0, gt=0)
    lambda_step: float = Field(0.01, gt=0)


class TrainConfig(_Model):
    n_init: int = Field(4, gt=0)
    init_size: tuple[int, int] = (10, 20)
    gamma: float = Field(1.0, gt=0)
    epochs: int = Field(10, ge=0)
    min_bases: int = Field(2, ge=1)
    grow_cap: int = Field(4, ge=0)
    idle_grace: int = Field(2, gt=0)
    init_draws: int = Field(1000, gt=0)
    # rows and columns around each placement a relearned template may grow into
    context: tuple[int, int] = (4, 4)
    # fraction of patches that must hold a basis found outside the old template box
    grow_support: float = Field(0.5, gt=0, le=1)
    incremental: bool = True
    seed: int = 0
    progress: bool = False
    encoder: EncoderConfig = EncoderConfig()
    stat: StatConfig = StatConfig()

    @field_validator("init_size")
    @classmethod
    def _size(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError("init_size must be positive")
        return v

    @field_validator("context")
    @classmethod
    def _context(cls, v):
        if v[0] < 0 or v[1] < 0:
            raise ValueError("context margins must be non-negative")
        return v


class ScaleSchedule(_Model):
    """Maximum template widths (columns) for hierarchical parsing, finest first."""

    widths: tuple[int, ...]

    @field_validator("widths")
    @classmethod
    def _increasing(cls, v):
        if not v:
            raise ValueError("scale schedule must not be empty")
        if any(w <= 0 for w in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"scale schedule must be strictly increasing positive widths, got {v}")
        return tuple(v)

    @classmethod
    def parse(cls, text: str) -> "ScaleSchedule":
        try:
            widths = tuple(int(part) for part in text.split(",") if part.strip())
            return cls(widths=widths)
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"invalid scale schedule {text!r}: {e}") from e


class RunConfig(_Model):
    batch: BatchSpec = BatchSpec()
    train: TrainConfig = TrainConfig()
    midi_paths: tuple[str, ...] = ()
    out_dir: str = "runs"
    log_level: str = "INFO"

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_overrides(self, **changes) -> "RunConfig":
        """Return a copy with dotted-path overrides, e.g. ``{"train.epochs": 3}``."""
        data = self.model_dump(mode="json")
        for dotted, value in changes.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return validate_run_config(data)


def validate_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _env_overrides() -> dict:
    load_dotenv()
    overrides = {}
    if os.getenv("MW_SEED"):
        overrides["train.seed"] = int(os.environ["MW_SEED"])
    if os.getenv("MW_N_JOBS"):
        overrides["train.encoder.n_jobs"] = int(os.environ["MW_N_JOBS"])
    if os.getenv("MW_LOG_LEVEL"):
        overrides["log_level"] = os.environ["MW_LOG_LEVEL"]
    if os.getenv("MW_RUNS_DIR"):
        overrides["out_dir"] = os.environ["MW_RUNS_DIR"]
    return overrides


def load_run_config(path: Optional[str | Path] = None, use_env: bool = True) -> RunConfig:
    """Load a RunConfig from YAML/JSON (or defaults), then apply environment overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(text) if path.suffix == ".json" else (yaml.safe_load(text) or {})
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping at the top level")
        data.pop("schema", None)
    config = validate_run_config(data)
    if use_env:
        config = config.with_overrides(**_env_overrides())
    return config
