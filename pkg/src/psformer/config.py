"""Line-oriented ``key = value`` configuration files.

Dotted keys nest (``model.embed_dim = 128``); ``#`` starts a comment.
Unknown keys are errors so typos never pass silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import AugmentParams
from .errors import ConfigError
from .model import ModelConfig


def parse_config_text(text):
    """Parse config text into a nested dict of raw string values."""
    tree = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} nests under a scalar key")
        if parts[-1] in node:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        node[parts[-1]] = value
    return tree


def _convert(raw, target_type, key):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {target_type.__name__}, got {raw!r}") from None


@dataclass
class DataSpec:
    """Either a manifest pair on disk or a synthetic dataset request.

    The dataset seed is independent of the training seed so ablations can
    vary initialization and ordering over a fixed benchmark.
    """

    synth: str = "classification"       # "classification" | "segmentation" | "manifest"
    seed: int = 0
    n_per_class: int = 50
    n_samples: int = 300                # segmentation sample count (train)
    n_test_samples: int = 75
    train_manifest: str = ""
    test_manifest: str = ""


@dataclass
class TrainConfig:
    model: ModelConfig
    data: DataSpec = field(default_factory=DataSpec)
    augment: AugmentParams = field(default_factory=AugmentParams)
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    schedule: str = "constant"          # "constant" | "cosine"
    lr_min: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    augment_train: bool = True

    def validate(self):
        self.model.validate()
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.schedule == "cosine" and self.lr_min > self.lr:
            raise ConfigError("lr_min must not exceed lr")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.data.synth not in ("classification", "segmentation", "manifest"):
            raise ConfigError(f"unknown data source {self.data.synth!r}")
        self.augment.validate()


_SCALAR_TYPES = {
    "optimizer": str, "lr": float, "weight_decay": float, "schedule": str,
    "lr_min": float, "epochs": int, "batch_size": int, "seed": int,
    "augment_train": bool,
}
_MODEL_TYPES = {
    "n_points": int, "n_condensed": int, "n_classes": int, "embed_dim": int,
    "knn_k": int, "n_ps_layers": int, "topk": int, "task": str,
    "variant": str, "structure_only": bool, "subtract": bool,
    "input_channels": int, "seed": int,
}
_DATA_TYPES = {
    "synth": str, "seed": int, "n_per_class": int, "n_samples": int,
    "n_test_samples": int, "train_manifest": str, "test_manifest": str,
}
_AUGMENT_TYPES = {
    "translate_range": float, "scale_low": float, "scale_high": float,
    "dropout_max": float,
}


def _section(cls, raw, types, prefix):
    kwargs = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown key {prefix}{key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{prefix}{key!r} cannot nest further")
        kwargs[key] = _convert(value, types[key], f"{prefix}{key}")
    return cls(**kwargs)


def train_config_from_text(text):
    tree = parse_config_text(text)
    model_raw = tree.pop("model", None)
    if model_raw is None:
        raise ConfigError("config requires a model section (model.* keys)")
    model = _section(ModelConfig, model_raw, _MODEL_TYPES, "model.")
    data = _section(DataSpec, tree.pop("data", {}), _DATA_TYPES, "data.")
    aug = _section(AugmentParams, tree.pop("augment", {}), _AUGMENT_TYPES, "augment.")

    kwargs = {}
    for key, value in tree.items():
        if key not in _SCALAR_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key!r} cannot nest")
        kwargs[key] = _convert(value, _SCALAR_TYPES[key], key)

    cfg = TrainConfig(model=model, data=data, augment=aug, **kwargs)
    cfg.validate()
    return cfg


def load_train_config(path):
    with open(path) as fh:
        return train_config_from_text(fh.read())
