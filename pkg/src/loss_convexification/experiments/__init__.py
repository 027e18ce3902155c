from .experiment_runner import EXIT_CODES, ExperimentRunner, run_experiment
from .registry import EXPERIMENTS
from .template_experiments.base_experiment import BaseExperimentTemplate

__all__ = ["EXIT_CODES", "EXPERIMENTS", "BaseExperimentTemplate", "ExperimentRunner", "run_experiment"]
