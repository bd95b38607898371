"""
Run configuration: flat `key = value` files, CLI and environment overrides,
and the canonical snapshot every result file is stamped with.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError
from gumbel_sampler import DensityMode, TemperatureSchedule
from importance_bound import NoiseMode
from mirror_descent import EmdConfig
from scene_graph import TaskConfig
from structure_learning import LearnConfig
from variational_inference import InferenceConfig, PiInit, ReadoutMode

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "IWSL_OUTPUT_DIR"

# keys that never change result bytes stay out of the snapshot
NON_RESULT_KEYS = {"output_dir", "workers", "registry_url"}


class RunConfig(BaseModel):
    """Every tunable of every command; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    # task
    d: int = Field(16, ge=1)
    v_o: int = Field(5, ge=1)
    v_p: int = Field(4, ge=1)
    m_range: Tuple[int, int] = (2, 5)
    n_range: Tuple[int, int] = (1, 4)
    class_separation: float = Field(3.0, ge=0.0)
    label_skew: float = Field(0.5, ge=0.0)
    pair_density: float = Field(0.25, ge=0.0, le=1.0)
    count: int = Field(500, ge=1)
    heldout_count: int = Field(200, ge=0)
    seed: int = Field(0, ge=0)

    # inference
    samples_infer: int = Field(50, ge=1)
    readout: ReadoutMode = ReadoutMode.POSTERIOR
    pi_init: PiInit = PiInit.UNIFORM
    density: DensityMode = DensityMode.PAPER
    noise: NoiseMode = NoiseMode.FROZEN
    emd_iters: int = Field(300, ge=1)
    emd_gamma: float = Field(1.0, gt=0.0)
    emd_eps: float = Field(1e-5, gt=0.0)

    # learning
    samples_learn: int = Field(5000, ge=1)
    tau: float = Field(1.0, gt=0.0)
    tau_min: float = Field(0.3, gt=0.0)
    beta: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(0.01, ge=0.0)
    iterations: int = Field(2000, ge=1)
    hidden: List[int] = Field(default_factory=lambda: [64])
    top_k: int = Field(2, ge=1)
    recall_ks: List[int] = Field(default_factory=lambda: [1, 2, 3])

    # runner
    sample_counts: List[int] = Field(default_factory=lambda: [10, 30, 50])
    workers: int = Field(1, ge=1)
    output_dir: str = "runs"
    registry_url: Optional[str] = None

    @field_validator("m_range", "n_range", "hidden", "sample_counts", "recall_ks", mode="before")
    @classmethod
    def split_commas(cls, v):
        if isinstance(v, str):
            return [p.strip() for p in v.split(",") if p.strip()]
        if isinstance(v, int):
            return [v]
        return v

    @field_validator("density", mode="before")
    @classmethod
    def density_alias(cls, v):
        if isinstance(v, str) and v.strip().lower() == "surrogate":
            return DensityMode.PAPER
        return v

    @field_validator("sample_counts", "recall_ks")
    @classmethod
    def positive_counts(cls, v):
        if not v or any(s < 1 for s in v):
            raise ValueError("must be a non-empty list of positive integers")
        return v

    def task_config(self) -> TaskConfig:
        return TaskConfig(d=self.d, v_o=self.v_o, v_p=self.v_p, m_range=self.m_range, n_range=self.n_range,
                          class_separation=self.class_separation, label_skew=self.label_skew,
                          pair_density=self.pair_density, seed=self.seed)

    def emd_config(self) -> EmdConfig:
        return EmdConfig(max_iters=self.emd_iters, gamma0=self.emd_gamma, epsilon=self.emd_eps)

    def inference_config(self, tau: Optional[float] = None) -> InferenceConfig:
        return InferenceConfig(samples_infer=self.samples_infer, tau=self.tau if tau is None else tau,
                               emd=self.emd_config(), readout=self.readout, pi_init=self.pi_init,
                               density=self.density, noise=self.noise, seed=self.seed)

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(tau0=self.tau, tau_min=self.tau_min, beta=self.beta)

    def learn_config(self) -> LearnConfig:
        return LearnConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           iterations=self.iterations, samples_learn=self.samples_learn,
                           schedule=self.schedule(), hidden=self.hidden, seed=self.seed,
                           workers=self.workers)


def parse_key_value_text(text: str) -> Dict[str, str]:
    """`key = value` lines; `#` starts a comment; blank lines ignored"""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _format_errors(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    defaults < config file < overrides (CLI flags) < IWSL_OUTPUT_DIR.

    A .env file in the working directory is loaded first.
    """
    load_dotenv()
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_key_value_text(path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    env_out = os.getenv(OUTPUT_DIR_ENV)
    if env_out:
        values["output_dir"] = env_out

    try:
        cfg = RunConfig(**values)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {_format_errors(e)}")
        raise ConfigError(f"invalid configuration: {_format_errors(e)}") from e
    try:
        cfg.task_config()
        cfg.schedule()
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_format_errors(e)}") from e
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_snapshot(cfg: RunConfig) -> str:
    """Sorted `key = value` text of every result-affecting key"""
    lines = []
    for key in sorted(RunConfig.model_fields):
        value = getattr(cfg, key)
        if key in NON_RESULT_KEYS or value is None:
            continue
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_snapshot(cfg).encode("utf-8")).hexdigest()
