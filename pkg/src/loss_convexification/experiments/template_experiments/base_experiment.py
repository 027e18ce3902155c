import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ...autodiff import ParamSet
from ...convexification import NeighborhoodSampler
from ...errors import ConfigError
from ...harness.checkpoint import load_checkpoint
from ...harness.export import write_csv, write_json
from ...harness.metrics import classification_accuracy, registration_metrics
from ...inference import InferenceConfig, infer
from ...tasks import build_task
from ...tasks.base_task import Sample, Task
from ...tasks.pointcloud_io import load_or_generate
from ...tasks.registration import RegistrationDataConfig, RegistrationTask
from ...tasks.sequence import SequenceTask

logger = logging.getLogger(__name__)

# Config field types an experiment may declare in its ``inputs`` schema
VALID_TYPES = {
    "string": str,
    "int": int,
    "float": (int, float),
    "bool": bool,
    "dict": dict,
    "list": list,
}

# Offset between the training and the held-out data seed
TEST_SEED_OFFSET = 10_000

# Data keys naming a gen-data directory for the training and the held-out split
DIRECTORY_KEYS = ("dir", "test_dir")


class BaseExperimentTemplate:
    """Base template for experiments.

    Subclasses declare ``name``, ``description`` and an ``inputs`` schema
    mapping each config field to ``{"type", "description", "nullable",
    "default"}``, and implement ``forward(config, out_dir)`` returning the
    summary record. Every artifact except ``metadata.json`` is a pure
    function of the config.
    """

    name = "experiment"
    description = ""
    inputs: Dict[str, Dict[str, Any]] = {}
    output_type = "directory"

    def __init__(self):
        self._validate_schema()
        self.metadata: Dict[str, Any] = {}

    def _validate_schema(self) -> None:
        for field_name, spec in self.inputs.items():
            if "type" not in spec:
                raise ConfigError(f"{self.name}: input '{field_name}' must specify a type")
            if spec["type"] not in VALID_TYPES:
                raise ConfigError(f"{self.name}: invalid type for input '{field_name}': {spec['type']}")
            default = spec.get("default")
            if default is not None and not self._type_ok(default, spec["type"]):
                raise ConfigError(f"{self.name}: default of '{field_name}' must be of type {spec['type']}")

    @staticmethod
    def _type_ok(value: Any, type_name: str) -> bool:
        if type_name in ("int", "float") and isinstance(value, bool):
            return False
        return isinstance(value, VALID_TYPES[type_name])

    def validate(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Check ``config`` against ``inputs`` and fill in defaults."""
        unknown = set(config) - set(self.inputs)
        if unknown:
            raise ConfigError(f"{self.name}: unknown config fields {sorted(unknown)}")
        resolved = {}
        for field_name, spec in self.inputs.items():
            value = config.get(field_name, spec.get("default"))
            if value is None:
                if not spec.get("nullable", False):
                    raise ConfigError(f"{self.name}: required parameter '{field_name}' is missing")
            elif not self._type_ok(value, spec["type"]):
                raise ConfigError(f"{self.name}: parameter '{field_name}' must be of type {spec['type']}")
            resolved[field_name] = value
        return resolved

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        raise NotImplementedError("Experiment functionality needs to be implemented")

    def run(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        """Validate, write the config echo, run and write summary/metadata."""
        resolved = self.validate(config)
        os.makedirs(out_dir, exist_ok=True)
        self.metadata = {"experiment": self.name, "started": _now()}
        write_json(resolved, os.path.join(out_dir, "config.json"))
        summary = self.forward(resolved, out_dir)
        write_json(summary, os.path.join(out_dir, "summary.json"))
        self.metadata["finished"] = _now()
        write_json(self.metadata, os.path.join(out_dir, "metadata.json"))
        return summary

    # -- helpers shared by concrete experiments ------------------------------

    @staticmethod
    def write_seeds(out_dir: str, **seeds: Any) -> None:
        write_json(seeds, os.path.join(out_dir, "seeds.json"))

    @staticmethod
    def write_table(frame: pd.DataFrame, out_dir: str, filename: str) -> str:
        return write_csv(frame, os.path.join(out_dir, filename))

    @staticmethod
    def build_task(name: str, options: Optional[Dict[str, Any]]) -> Task:
        return build_task(name, **(options or {}))

    @staticmethod
    def load_params(task: Task, checkpoint: Optional[str], seed: int) -> ParamSet:
        """Weights from a checkpoint file, or a seeded untrained initialization."""
        if checkpoint:
            return load_checkpoint(checkpoint).params
        init_seq = np.random.SeedSequence(seed).spawn(3)[0]
        return task.init_params(np.random.default_rng(init_seq))

    @staticmethod
    def data_seed(data: Optional[Dict[str, Any]], seed: int) -> int:
        """Generator seed: an explicit ``data.seed`` wins over the run seed."""
        return int((data or {}).get("seed", seed))

    @staticmethod
    def dataset(
        task: Task, data: Optional[Dict[str, Any]], seed: int, size: Optional[int] = None, directory_key: str = "dir"
    ) -> List[Sample]:
        """Datapoints for one split.

        ``data[directory_key]`` names a gen-data ``pairs`` directory to read
        instead of generating; ``size`` then keeps the first pairs by id.
        """
        data = dict(data or {}, seed=seed)
        directory = data.get(directory_key)
        for key in DIRECTORY_KEYS:
            data.pop(key, None)
        if directory is not None and not isinstance(task, RegistrationTask):
            raise ConfigError(f"data.{directory_key} is only supported for registration tasks")
        if isinstance(task, RegistrationTask):
            if size is not None:
                data["n_pairs"] = size
            source = directory if directory is not None else RegistrationDataConfig.from_dict({"dim": task.dim, **data})
            pairs = load_or_generate(source)
            if directory is not None:
                pairs = pairs[:size] if size is not None else pairs
                if not pairs:
                    raise ConfigError(f"no point-cloud pairs found in {directory}")
            if any(pair.dim != task.dim for pair in pairs):
                raise ConfigError(f"{directory or 'data'} holds pairs that do not match the {task.dim}-D task")
            return [Sample(pair, pair.omega_star) for pair in pairs]
        if size is not None:
            data["n_samples"] = size
        return task.generate_dataset(data)

    @staticmethod
    def sampler(data: Optional[Dict[str, Any]]) -> Optional[NeighborhoodSampler]:
        return NeighborhoodSampler.from_dict(data) if data else None

    @staticmethod
    def evaluate(
        task: Task, params: ParamSet, samples: List[Sample], cfg: InferenceConfig, max_iters: Optional[int] = None
    ) -> Tuple[Dict[str, float], list]:
        """Test metrics of inference with budget ``max_iters`` (default ``cfg.max_iters``)."""
        if max_iters is not None:
            cfg = InferenceConfig.from_dict({**cfg.to_dict(), "max_iters": max_iters})
        results = [infer(task, sample.x, params, cfg) for sample in samples]
        predictions = [omega for omega, _ in results]
        truths = [sample.omega_star for sample in samples]
        metrics = {"final_loss": float(np.mean([traj.losses[-1] for _, traj in results]))}
        if isinstance(task, RegistrationTask):
            metrics.update(registration_metrics(predictions, truths))
        elif isinstance(task, SequenceTask):
            metrics["accuracy"] = classification_accuracy(predictions, truths)
        return metrics, results


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()
