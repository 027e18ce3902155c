from .analyzer import audit_star_convexity, check_lemma2, simulate_averaging, slice_landscape
from .autodiff import ComputationTape, ParamSet, check_gradient, forward
from .convexification import DlcConfig, NeighborhoodSampler, PredictionVector, dlc_loss
from .experiments import ExperimentRunner, run_experiment
from .inference import InferenceConfig, icp_refine, infer, kabsch
from .tasks import build_task

__version__ = "0.1.0"

# Make the main entry points available at package root level
__all__ = [
    "ComputationTape",
    "DlcConfig",
    "ExperimentRunner",
    "InferenceConfig",
    "NeighborhoodSampler",
    "ParamSet",
    "PredictionVector",
    "audit_star_convexity",
    "build_task",
    "check_gradient",
    "check_lemma2",
    "dlc_loss",
    "forward",
    "icp_refine",
    "infer",
    "kabsch",
    "run_experiment",
    "simulate_averaging",
    "slice_landscape",
]
