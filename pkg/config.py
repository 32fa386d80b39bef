"""
Run configuration: pydantic models loaded from TOML, plus fingerprints and
environment fallbacks
"""

import hashlib
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from containers import canonical_json
from errors import ConfigError

SCHEMA_VERSION = 1
DEFAULT_OUT_DIR = "runs"


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(Section):
    n_shapes: int = Field(20, ge=2)
    n_styles: int = Field(6, ge=2)
    per_cell: int = Field(20, ge=1)
    resolution: int = Field(16, ge=8)
    jitter: bool = True
    max_shift: int = Field(1, ge=0)
    intensity_jitter: float = Field(0.15, ge=0.0, lt=1.0)
    # one withheld (shape, style) cell per token; those cells only hold exemplars
    n_exemplar_concepts: int = Field(20, ge=0)
    exemplars_per_concept: int = Field(4, ge=1)


class ScheduleConfig(Section):
    kind: Literal["linear-beta", "cosine"] = "linear-beta"
    T: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)
    ddim_steps: int = Field(50, ge=1)


class ModelConfig(Section):
    hidden: int = Field(256, ge=1)
    n_hidden_layers: int = Field(3, ge=1)
    time_dim: int = Field(32, ge=2)
    activation: Literal["silu"] = "silu"


class TrainingConfig(Section):
    steps: int = Field(20000, ge=0)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    p_uncond: float = Field(0.1, ge=0.0, le=1.0)
    log_every: int = Field(500, ge=1)


class InversionConfig(Section):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    init_scale: float = Field(0.01, ge=0.0)


class GradientsConfig(Section):
    train_loss: Literal["dsm", "dps", "dtrak"] = "dps"
    utility_loss: Literal["dsm", "reward-dps", "dtrak"] = "reward-dps"
    n_timesteps: int = Field(64, ge=1)
    n_trajectories: int = Field(16, ge=1)
    utility_timesteps: int = Field(64, ge=1)
    use_ddim_inversion: bool = True
    normalize: bool = True
    w: float = Field(1.0, gt=0.0)
    beta_inv: float = Field(1.0, gt=0.0)
    sigma_scaling: bool = True
    cfg_scale: float = Field(1.0, ge=0.0)


class ProjectorConfig(Section):
    k: int = Field(512, ge=1)
    seed: int = Field(0, ge=0)
    distribution: Literal["rademacher", "gaussian"] = "rademacher"
    block_rows: int = Field(8192, ge=1)


class AttributionConfig(Section):
    lambda_policy: Literal["auto", "fixed", "sweep"] = "auto"
    lambda_value: Optional[float] = Field(None, ge=0.0)
    sweep_points: int = Field(9, ge=1)
    sweep_decades: float = Field(4.0, ge=0.0)
    top_k: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _fixed_needs_value(self):
        if self.lambda_policy == "fixed" and self.lambda_value is None:
            raise ValueError("lambda_policy 'fixed' requires lambda_value")
        return self


class BenchmarkConfig(Section):
    n_tokens: int = Field(20, ge=1)
    generations_per_token: int = Field(20, ge=1)
    recall_at: List[int] = Field(default_factory=lambda: [10])
    sampling_steps: int = Field(50, ge=1)
    sweep_baselines: bool = True
    include_dtrak: bool = True
    chart: bool = True


class OracleConfig(Section):
    n_shapes: int = Field(4, ge=2)
    n_styles: int = Field(2, ge=2)
    n_train: int = Field(64, ge=2)
    max_samples: int = Field(256, ge=2)
    training_steps: int = Field(2000, ge=0)
    target_concept: int = Field(0, ge=0)
    removed_ids: Optional[List[int]] = None
    n_generations: int = Field(64, ge=1)
    reward_draws: int = Field(16, ge=1)
    replicates: int = Field(5, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1]
    seed: int = Field(..., ge=0)
    output_dir: Optional[str] = None
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    inversion: InversionConfig = Field(default_factory=InversionConfig)
    gradients: GradientsConfig = Field(default_factory=GradientsConfig)
    projector: ProjectorConfig = Field(default_factory=ProjectorConfig)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)

    def fingerprint(self, *sections: str) -> str:
        """Hex BLAKE2b-128 of the canonical JSON of the named sections (all semantic ones by default)"""
        dumped = self.model_dump(mode="json", exclude={"output_dir"})
        names = sections or tuple(sorted(dumped))
        unknown = [s for s in names if s not in dumped]
        if unknown:
            raise KeyError(f"unknown config sections: {unknown}")
        return hashlib.blake2b(canonical_json({s: dumped[s] for s in names}), digest_size=16).hexdigest()

    def checkpoint_fingerprint(self) -> str:
        return self.fingerprint("dataset", "schedule", "model", "training", "seed")

    def projection_fingerprint(self, **gradients) -> str:
        """Fingerprint shared by a gradient store, its Hessian and the utility gradients scored against it.

        Covers the checkpoint, the schedule, the projector, the whole gradients section and the
        trajectory sampling steps. Keyword arguments override gradients fields (one ablation rung).
        """
        unknown = sorted(set(gradients) - set(GradientsConfig.model_fields))
        if unknown:
            raise KeyError(f"unknown gradients fields: {unknown}")
        section = self.gradients.model_dump(mode="json")
        section.update(gradients)
        payload = {
            "checkpoint": self.checkpoint_fingerprint(),
            "schedule": self.schedule.model_dump(mode="json"),
            "projector": self.projector.model_dump(mode="json"),
            "gradients": GradientsConfig.model_validate(section).model_dump(mode="json"),
            "sampling_steps": self.benchmark.sampling_steps,
        }
        return hashlib.blake2b(canonical_json(payload), digest_size=16).hexdigest()

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed})

    def with_section(self, name: str, **changes) -> "RunConfig":
        section = getattr(self, name).model_copy(update=changes)
        return self.model_copy(update={name: section})


def derive_seed(root: int, label: str) -> int:
    """Deterministic 63-bit seed for a named component"""
    digest = hashlib.blake2b(f"{root}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _format_validation_error(err: ValidationError, source: str) -> str:
    lines = [f"{source}: invalid configuration"]
    for item in err.errors():
        field = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"  {field}: {item['msg']}")
    return "\n".join(lines)


def parse_config(data: Dict, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e, source)) from e


def load_config(path: Union[str, Path]) -> RunConfig:
    """Load a TOML run config; unknown keys and missing fields are hard errors"""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        # message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(data, source=str(path))


def resolve_output_dir(cli_out: Optional[str], config: Optional[RunConfig] = None) -> Path:
    """--out, then CTRAK_OUT_DIR, then the config's output_dir, then ./runs"""
    out = cli_out or os.getenv("CTRAK_OUT_DIR") or (config.output_dir if config else None) or DEFAULT_OUT_DIR
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path
