from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PRESETS, OptimizerConfig, TrainConfig, load_json_config, preset_config
from .metrics import classification_accuracy, registration_metrics
from .optimizers import SGD, Adam, build_optimizer
from .training import Trainer, train

__all__ = [
    "PRESETS",
    "SGD",
    "Adam",
    "Checkpoint",
    "OptimizerConfig",
    "TrainConfig",
    "Trainer",
    "build_optimizer",
    "classification_accuracy",
    "load_checkpoint",
    "load_json_config",
    "preset_config",
    "registration_metrics",
    "save_checkpoint",
    "train",
]
