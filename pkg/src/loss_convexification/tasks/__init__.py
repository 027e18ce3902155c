from typing import Any

from ..errors import ConfigError
from .base_task import Sample, Task
from .geometry import RigidMotion, apply_transform, rotation_matrix
from .oracles import AnalyticOracle, analytic_oracles
from .registration import PointCloudPair, RegistrationTask, generate_registration_dataset, registration_loss
from .sequence import SequenceSample, SequenceTask, generate_sequence_dataset, sequence_loss

TASK_NAMES = ("registration-2d", "registration-3d", "sequence", "oracle:<name>")


def build_task(name: str, **options: Any) -> Task:
    """Instantiate a task by id, e.g. ``registration-2d`` or ``oracle:quadratic``."""
    try:
        return _build_task(name, **options)
    except TypeError as err:
        raise ConfigError(f"invalid options for task '{name}': {err}") from None


def _build_task(name: str, **options: Any) -> Task:
    if name in ("registration-2d", "registration-3d"):
        return RegistrationTask(dim=int(name[-2]), **options)
    if name == "sequence":
        return SequenceTask(**options)
    if name.startswith("oracle:"):
        registry = analytic_oracles(**options)
        oracle = registry.get(name[len("oracle:"):])
        if oracle is None:
            raise ConfigError(f"unknown oracle '{name}', available: {sorted(registry)}")
        return oracle
    raise ConfigError(f"unknown task '{name}', expected one of {TASK_NAMES}")


__all__ = [
    "AnalyticOracle",
    "PointCloudPair",
    "RegistrationTask",
    "RigidMotion",
    "Sample",
    "SequenceSample",
    "SequenceTask",
    "Task",
    "analytic_oracles",
    "apply_transform",
    "build_task",
    "generate_registration_dataset",
    "generate_sequence_dataset",
    "registration_loss",
    "rotation_matrix",
    "sequence_loss",
]
