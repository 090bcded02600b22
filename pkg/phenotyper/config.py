"""
Phenotyper configuration.

- pydantic models for every stage (validated on construction)
- TOML files (one table per stage) with dotted-key overrides from the command line
- PHENOTYPER_* environment defaults, loaded by the CLI through python-dotenv
- Stage seeds derived from the global seed, so one number reproduces a whole run
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

STAGE_NAMES = ("cohort", "match", "embed", "tensorize", "fit", "evaluate", "export")

ENV_LOG_LEVEL = "PHENOTYPER_LOG_LEVEL"
ENV_OUT = "PHENOTYPER_OUT"
ENV_SEED = "PHENOTYPER_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


class SynthConfig(_Strict):
    """Planted-phenotype cohort generator settings."""

    n_patients: int = Field(200, ge=2)
    n_entities: int = Field(40, ge=4)
    rank: int = Field(5, ge=1)
    visits_min: int = Field(3, ge=1)
    visits_max: int = Field(8, ge=1)
    entities_per_visit_max: int = Field(3, ge=1)
    noise_rate: float = Field(0.05, ge=0.0, lt=1.0)
    # logistic link temperature for the planted labels
    label_temperature: float = Field(3.0, gt=0.0)
    # Dirichlet concentration of the planted pattern weights
    concentration: float = Field(5.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _visit_range(self) -> "SynthConfig":
        if self.visits_max < self.visits_min:
            raise ValueError("visits_max must be >= visits_min")
        return self


class PoolConfig(_Strict):
    """Case/control covariate pools for the matching stage."""

    n_cases: int = Field(1000, ge=1)
    n_controls: int = Field(5000, ge=1)
    shift_sd: float = Field(0.5, ge=0.0)
    case_outcome_rate: float = Field(0.023, gt=0.0, lt=1.0)
    control_outcome_rate: float = Field(0.012, gt=0.0, lt=1.0)
    seed: int = 0


class IngestConfig(_Strict):
    min_prevalence: float = Field(0.05, ge=0.0, lt=1.0)


class MatchConfig(_Strict):
    """Propensity-score matching settings."""

    cases_path: str | None = None
    controls_path: str | None = None
    l2: float = Field(1.0, ge=0.0)
    # absolute caliper in logit units; when unset, caliper_sd * sd(logit score)
    caliper: float | None = Field(None, ge=0.0)
    caliper_sd: float = Field(0.2, gt=0.0)
    bias_budget: float = Field(5.0, gt=0.0)
    max_rounds: int = Field(20, ge=1)
    shrink: float = Field(0.8, gt=0.0, lt=1.0)
    apply_eligibility: bool = True
    min_age: float = Field(45.0, ge=0.0)
    min_window: float = Field(0.5, ge=0.0)


class SgdConfig(_Strict):
    """Skip-gram negative-sampling settings."""

    d: int = Field(32, ge=2)
    negatives: int = Field(5, ge=1)
    epochs: int = Field(5, ge=0)
    learning_rate: float = Field(0.025, gt=0.0)
    min_learning_rate: float = Field(1e-4, gt=0.0)
    noise_exponent: float = Field(0.75, gt=0.0)
    similarity_source: Literal["input", "average"] = "input"
    seed: int = 0


class TensorConfig(_Strict):
    mode: Literal["patient_normalized", "counts"] = "patient_normalized"
    include_self_loops: bool = True


class HyperParams(_Strict):
    """Coupled factorization hyper-parameters (R, mu, lambda, gamma and optimizer)."""

    rank: int = Field(30, ge=1)
    mu: float = Field(1.0, ge=0.0)
    lam: float = Field(0.1, ge=0.0, alias="lambda")
    gamma: float = Field(1.0, ge=0.0)
    learning_rate: float = Field(0.01, gt=0.0)
    max_iters: int = Field(1000, ge=0)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    tol: float = Field(1e-7, ge=0.0)
    patience: int = Field(10, ge=1)
    seed: int = 0


class EvaluationConfig(_Strict):
    test_fraction: float = Field(0.3, gt=0.0, lt=1.0)
    bins: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.5)
    standardize: bool = True
    penalized: bool = False
    penalty: float = Field(1.0, gt=0.0)

    @field_validator("bins")
    @classmethod
    def _ascending(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("bins must be strictly ascending")
        return value


class ExportConfig(_Strict):
    format: Literal["dot", "json"] = "dot"
    epsilon: float = Field(16.0, gt=0.0)
    top_k: int = Field(15, ge=0)
    p_threshold: float = Field(0.05, gt=0.0, le=1.0)
    # when set, top_k edges are drawn at random from the best `sample_from_top`
    sample_from_top: int | None = Field(None, ge=1)


class StageFlags(_Strict):
    cohort: bool = True
    match: bool = True
    embed: bool = True
    tensorize: bool = True
    fit: bool = True
    evaluate: bool = True
    export: bool = True


class PipelineConfig(_Strict):
    """Full run description: global seed, input paths and one table per stage."""

    seed: int = 0
    out_dir: str = "artifacts"
    cohort_path: str | None = None
    cohort_format: Literal["jsonl", "csv"] | None = None
    synth: SynthConfig = SynthConfig()
    pools: PoolConfig = PoolConfig()
    ingest: IngestConfig = IngestConfig()
    matching: MatchConfig = MatchConfig()
    embedding: SgdConfig = SgdConfig()
    tensor: TensorConfig = TensorConfig()
    factorization: HyperParams = HyperParams()
    evaluation: EvaluationConfig = EvaluationConfig()
    export: ExportConfig = ExportConfig()
    stages: StageFlags = StageFlags()


M = TypeVar("M", bound=BaseModel)


def build_config(model: type[M], data: dict[str, Any] | None = None) -> M:
    """Validate `data` into `model`, converting pydantic errors into ConfigError."""
    try:
        return model.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def read_toml(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


def apply_overrides(data: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted keys (e.g. "factorization.rank") on a nested dict; None values are skipped."""
    merged = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split(".")
        node = merged
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a table")
        node[parts[-1]] = value
    return merged


def load_pipeline_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> PipelineConfig:
    """TOML file (optional) + environment defaults + flag overrides → PipelineConfig."""
    data: dict[str, Any] = read_toml(path) if path is not None else {}
    if ENV_SEED in os.environ and "seed" not in data:
        try:
            data["seed"] = int(os.environ[ENV_SEED])
        except ValueError as e:
            raise ConfigError(f"{ENV_SEED} must be an integer") from e
    if ENV_OUT in os.environ and "out_dir" not in data:
        data["out_dir"] = os.environ[ENV_OUT]
    data = apply_overrides(data, overrides or {})
    config = build_config(PipelineConfig, data)
    logger.debug("Pipeline config loaded (seed=%d, out_dir=%s)", config.seed, config.out_dir)
    return config


def derive_seed(global_seed: int, stage: str) -> int:
    """Stage seed = first 4 bytes of sha256("<seed>:<stage>")."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: PipelineConfig) -> str:
    """Content hash of a config, ignoring out_dir and the stage switches."""
    payload = config.model_dump(mode="json", by_alias=True, exclude={"out_dir", "stages"})
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
