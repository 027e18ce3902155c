"""Training configuration, presets and JSON config files."""
import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

from ..convexification import DlcConfig
from ..errors import ConfigError
from ..inference import InferenceConfig

logger = logging.getLogger(__name__)

OPTIMIZER_NAMES = ("sgd", "adam")


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.name not in OPTIMIZER_NAMES:
            raise ConfigError(f"optimizer must be one of {OPTIMIZER_NAMES}, got '{self.name}'")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if len(self.betas) != 2:
            raise ConfigError(f"betas must be a pair, got {self.betas}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OptimizerConfig":
        _reject_unknown("optimizer", data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class TrainConfig:
    """Everything a training run depends on.

    Attributes:
        task: task id understood by ``tasks.build_task``
        task_options: keyword options for the task constructor
        data: dataset generator settings for the task
        optimizer: optimizer settings
        epochs: passes over the dataset, each in a fresh seeded shuffle order
        batch_size: datapoints per update; 1 gives the per-datapoint updates of the plain algorithm
        dlc: convexification hyperparameters
        use_dlc: ``False`` trains on the plain task loss h(ω*)
        inference: test-time iteration settings used when evaluating the run
        seed: master seed; init, shuffle and sampling streams are spawned from it
        checkpoint_dir: where epoch checkpoints go (none when unset)
    """

    task: str = "registration-2d"
    task_options: Dict[str, Any] = field(default_factory=dict)
    data: Dict[str, Any] = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 1
    batch_size: int = 1
    dlc: DlcConfig = field(default_factory=DlcConfig)
    use_dlc: bool = True
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.optimizer, Mapping):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if isinstance(self.dlc, Mapping):
            self.dlc = DlcConfig.from_dict(self.dlc)
        if isinstance(self.inference, Mapping):
            self.inference = InferenceConfig.from_dict(self.inference)
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "task_options": dict(self.task_options),
            "data": dict(self.data),
            "optimizer": self.optimizer.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "dlc": self.dlc.to_dict(),
            "use_dlc": self.use_dlc,
            "inference": self.inference.to_dict(),
            "seed": self.seed,
            "checkpoint_dir": self.checkpoint_dir,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            data = deep_merge(preset_config(preset), data)
        _reject_unknown("train", data, cls.__dataclass_fields__)
        return cls(**data)


# Shipped hyperparameter sets; every other field keeps the TrainConfig default.
PRESETS: Dict[str, Dict[str, Any]] = {
    "registration-dcp": {
        "task": "registration-3d",
        "dlc": {"n_samples": 3, "rho": 0.6},
        "inference": {"max_iters": 5},
    },
    "registration-prnet": {
        "task": "registration-3d",
        "dlc": {"n_samples": 3, "rho": 1.0},
        "inference": {"max_iters": 5},
    },
    "alignment": {
        "task": "registration-2d",
        "dlc": {"mu": 4.0, "lambda": 0.5, "rho": 0.2},
    },
    "sequence-sgd": {
        "task": "sequence",
        "optimizer": {"name": "sgd", "lr": 0.05, "weight_decay": 0.0},
        "dlc": {"sampler": {"sigma": {"label": 1.0}, "mode": "noisy-one-hot-softmax"}},
        "inference": {"step_size": 0.5},
    },
}


def preset_config(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', available: {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def deep_merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively overlay ``overrides`` on ``base`` (dicts merge, other values replace)."""
    merged = copy.deepcopy(dict(base))
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_json_config(path: str) -> Dict[str, Any]:
    """Read a JSON config file into a dict."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed config file {path}: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    logger.debug("loaded config %s", path)
    return data


def _reject_unknown(section: str, data: Mapping[str, Any], known) -> None:
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
