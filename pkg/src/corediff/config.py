"""Pipeline configuration: strict YAML parsing and seed derivation.

The config file is a nested key/value document; unknown keys are errors so a
typo cannot silently change an experiment. Every stage seed is derived from
the one global seed by hashing the stage name, so a single integer reproduces
the whole pipeline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

_OFF_VALUES = (None, False, "off")


def stage_seed(global_seed: int, stage: str) -> int:
    """Stable 64-bit seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class DatasetSection:
    generator: str = "gaussian_mixture"
    K: int = 3
    per_class: int = 100
    d: int = 2
    path: str | None = None


@dataclass
class EncoderSection:
    kind: str = "identity"            # identity | classifier | pca
    hidden_widths: tuple = (32, 16)
    epochs: int = 50
    components: int = 2
    batch_size: int = 32
    path: str | None = None


@dataclass
class PruningSection:
    method: str = "moderate_ds"       # moderate_ds | gaussian | uniform_random
    data_ratio: float = 0.1
    per_class_gaussian: bool = False
    cov_reg: float = 1e-6


@dataclass
class DroSection:
    enabled: bool = True
    proxy_epochs: int = 10
    eta: float = 0.1
    smoothing: float = 1e-3
    batch_size: int = 32
    proxy_lr: float = 0.02


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.02
    p_uncond: float = 0.1
    anneal_ratio: float | None = None
    widths: tuple = (128, 128)
    time_dim: int = 16
    cond_dim: int = 8
    weight_mode: str = "multiplier"


@dataclass
class ScheduleSection:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SampleSection:
    per_class: int = 200
    sampler: str = "ddim"             # ddim | ddpm
    steps: int = 50
    guidance: float = 0.3


@dataclass
class EvalSection:
    cov_reg: float = 1e-6
    bandwidth: str | float = "median"
    emit_svg: bool = True


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pruning: PruningSection = field(default_factory=PruningSection)
    dro: DroSection = field(default_factory=DroSection)
    train: TrainSection = field(default_factory=TrainSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "encoder": EncoderSection,
    "pruning": PruningSection,
    "dro": DroSection,
    "train": TrainSection,
    "schedule": ScheduleSection,
    "sample": SampleSection,
    "eval": EvalSection,
}


def _build_section(cls, data, where: str):
    if data in _OFF_VALUES and cls is DroSection:
        return DroSection(enabled=False)
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        if key == "anneal_ratio" and value in _OFF_VALUES:
            value = None
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def parse_config(data: dict) -> PipelineConfig:
    """Validate a raw mapping into a PipelineConfig; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = PipelineConfig()
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"seed must be a nonnegative integer, got {value!r}")
            cfg.seed = value
        elif key == "out_dir":
            cfg.out_dir = str(value)
        elif key in _SECTION_TYPES:
            setattr(cfg, key, _build_section(_SECTION_TYPES[key], value, key))
        else:
            raise ConfigError(f"unknown key {key}")
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    if not 0.0 < cfg.pruning.data_ratio <= 1.0:
        raise ConfigError(f"pruning.data_ratio must be in (0, 1], got {cfg.pruning.data_ratio}")
    if cfg.pruning.method not in ("moderate_ds", "gaussian", "uniform_random"):
        raise ConfigError(f"unknown pruning.method {cfg.pruning.method!r}")
    if cfg.encoder.kind not in ("identity", "classifier", "pca") and cfg.encoder.path is None:
        raise ConfigError(f"unknown encoder.kind {cfg.encoder.kind!r}")
    if cfg.sample.sampler not in ("ddim", "ddpm"):
        raise ConfigError(f"unknown sample.sampler {cfg.sample.sampler!r}")
    if cfg.train.anneal_ratio is not None and not 0.0 < cfg.train.anneal_ratio <= 1.0:
        raise ConfigError(
            f"train.anneal_ratio must be in (0, 1] or off, got {cfg.train.anneal_ratio}"
        )


def load_config(path, out_override: str | None = None,
                seed_override: int | None = None) -> PipelineConfig:
    """Load and validate a YAML config file, applying CLI overrides."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if data is None:
        data = {}
    cfg = parse_config(data)
    if out_override is not None:
        cfg.out_dir = out_override
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Hash of the resolved config, excluding out_dir (a location, not semantics)."""
    payload = asdict(cfg)
    payload.pop("out_dir", None)
    canon = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
