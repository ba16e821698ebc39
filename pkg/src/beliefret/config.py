"""Run configuration documents.

Configs are JSON with a schema version. Loading rejects unknown keys, and
command-line overrides use dotted paths (``--set optim.steps=200``) with type
coercion against the dataclass field types.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .losses import LossConfig

SCHEMA_VERSION = 1

STAGES = ("closed-domain", "stage1-pretrain", "stage2-finetune")
BELIEF_MODES = ("hard", "soft-sequence", "soft-aggregate")
PRECISIONS = ("float64", "float32")
INSTRUCTION_SOURCES = ("frozen-scene-table", "learned-scene-table", "toy-conv-encoder")

# Full-scale reference configuration of the original training recipe. Far
# beyond desk scale; documented here and in the README, never used by tests.
FULL_SCALE_REFERENCE = {
    "embed_dim": 512,
    "heads": 8,
    "dropout_rate": 0.2,
    "spatial_units": 2,
    "temporal_units": 3,
    "tau": 0.07,
    "lambda_cs": 1.0,
    "visual_tokens": 50,
    "pretrain_batch_size": 256,
    "pretrain_epochs": 20,
    "finetune_batch_size": 512,
    "finetune_epochs": 10,
}


@dataclass
class ModelSettings:
    embed_dim: int = 32
    encoder_dim: int = 48
    heads: int = 2
    encoder_blocks: int = 2
    spatial_units: int = 2
    temporal_units: int = 3
    patch_size: int = 4
    image_size: int = 16
    max_text_len: int = 16
    vocab_size: int = 0  # 0: take from the dataset header
    ffn_ratio: int = 2
    use_position_encoding: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "encoder_dim", "heads", "encoder_blocks", "spatial_units",
                     "temporal_units", "patch_size", "image_size", "max_text_len", "ffn_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be at least 1")


@dataclass
class BeliefSettings:
    mode: str = "soft-sequence"
    filter_k: int = 8  # hard mode only

    def __post_init__(self):
        if self.mode not in BELIEF_MODES:
            raise ConfigError(f"belief.mode must be one of {BELIEF_MODES}, got {self.mode!r}")
        if self.filter_k < 1:
            raise ConfigError("belief.filter_k must be at least 1")


@dataclass
class OptimSettings:
    learning_rate: float = 0.02
    steps: int = 500
    batch_size: int = 32
    eval_every_epochs: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("optim.learning_rate must be positive")
        if self.steps < 0:
            raise ConfigError("optim.steps must be nonnegative")
        for name in ("batch_size", "eval_every_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"optim.{name} must be at least 1")


@dataclass
class DataSettings:
    train_path: str = ""
    val_path: str = ""  # empty: stratified split from the training file
    val_images_per_class: int = 2

    def __post_init__(self):
        if self.val_images_per_class < 0:
            raise ConfigError("data.val_images_per_class must be nonnegative")


@dataclass
class TrainConfig:
    schema_version: int = SCHEMA_VERSION
    stage: str = "closed-domain"
    seed: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    belief: BeliefSettings = field(default_factory=BeliefSettings)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    data: DataSettings = field(default_factory=DataSettings)
    use_spatial_pae: bool = True
    use_temporal_pae: bool = True
    instruction_source: str = "frozen-scene-table"
    dropout_rate: float = 0.0
    precision: str = "float64"
    init_from: str = ""  # stage-2 fine-tuning: checkpoint to start from

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.instruction_source not in INSTRUCTION_SOURCES:
            raise ConfigError(f"unknown instruction source {self.instruction_source!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


_NESTED_FIELDS = {
    "model": ModelSettings,
    "belief": BeliefSettings,
    "loss": LossConfig,
    "optim": OptimSettings,
    "data": DataSettings,
}


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED_FIELDS.get(key) if cls is TrainConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key} must be an object")
            kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config under {path or 'top level'}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    return _build(TrainConfig, dict(data), "")


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _coerce(raw: str, target_type, key: str):
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean override {key}={raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse override {key}={raw!r} as {target_type.__name__}") from exc
    return raw


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``key.path=value`` strings and revalidate the config."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        node = data
        cls = TrainConfig
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[part]
            cls = _NESTED_FIELDS.get(part)
            if cls is None:
                raise ConfigError(f"unknown config section {dotted!r}")
        leaf = parts[-1]
        if leaf not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = _coerce(raw, type(node[leaf]), dotted)
    return config_from_dict(data)
