import logging
from typing import Any, Dict, Optional

from ..errors import CheckpointError, ConfigError, ConvexificationError, NonFiniteError
from ..harness.config import load_json_config
from .registry import EXPERIMENTS

logger = logging.getLogger(__name__)

# Process exit code per error kind
EXIT_CODES = {"config": 2, "checkpoint": 2, "numeric": 3, "runtime": 1}


def _error_kind(err: Exception) -> str:
    if isinstance(err, ConfigError):
        return "config"
    if isinstance(err, CheckpointError):
        return "checkpoint"
    if isinstance(err, NonFiniteError):
        return "numeric"
    return "runtime"


class ExperimentRunner:
    """Looks up registered experiments and runs them into output directories."""

    def __init__(self, experiments: Optional[Dict[str, Any]] = None):
        self.experiments = dict(EXPERIMENTS if experiments is None else experiments)

    def load_config(self, path: Optional[str]) -> Dict[str, Any]:
        """Read a JSON config file; no path means an empty config."""
        return load_json_config(path) if path else {}

    def _resolve(self, name: str, config: Dict[str, Any], seed: Optional[int]):
        experiment = self.experiments.get(name)
        if experiment is None:
            raise ConfigError(f"unknown experiment '{name}', available: {sorted(self.experiments)}")
        config = dict(config)
        if seed is not None:
            if "seed" in experiment.inputs:
                config["seed"] = seed
            elif "seeds" in experiment.inputs:
                config["seeds"] = [seed]
        return experiment, config

    def run_experiment(
        self, name: str, config: Dict[str, Any], out_dir: str, seed: Optional[int] = None
    ) -> Dict[str, Any]:
        """
        Runs one experiment and reports the outcome as a record

        Args:
            name: Registered experiment name, e.g. ``audit``
            config: Experiment config; unknown fields are rejected
            out_dir: Directory receiving every artifact
            seed: Optional override of the config seed

        Returns:
            ``{"status": "success", "summary": ...}`` or
            ``{"status": "error", "kind": ..., "error": ...}``
        """
        try:
            experiment, config = self._resolve(name, config, seed)
            logger.info("running experiment %s into %s", name, out_dir)
            summary = experiment.run(config, out_dir)
            logger.info("experiment %s finished", name)
            return {
                "status": "success",
                "experiment": name,
                "out_dir": out_dir,
                "summary": summary,
            }
        except ConvexificationError as e:
            kind = _error_kind(e)
            logger.error("experiment %s failed (%s): %s", name, kind, e)
            return {"status": "error", "experiment": name, "kind": kind, "error": str(e)}
        except Exception as e:
            logger.exception("experiment %s crashed", name)
            return {"status": "error", "experiment": name, "kind": "runtime", "error": str(e)}


def run_experiment(name: str, config: Dict[str, Any], out_dir: str, seed: Optional[int] = None) -> Dict[str, Any]:
    return ExperimentRunner().run_experiment(name, config, out_dir, seed)
