from .analysis_experiments import AuditExperiment, AveragingSimExperiment, GenerateDataExperiment, SliceExperiment
from .inference_experiments import IcpAblationExperiment, InferSweepExperiment
from .training_experiments import (
    CompareExperiment,
    ConstraintAblationExperiment,
    GridSearchExperiment,
    TrainExperiment,
    TrainSequenceExperiment,
)

# Create instances of the experiments
gen_data = GenerateDataExperiment()
train_registration = TrainExperiment()
train_sequence = TrainSequenceExperiment()
infer_sweep = InferSweepExperiment()
icp_ablation = IcpAblationExperiment()
audit = AuditExperiment()
landscape_slice = SliceExperiment()
averaging_sim = AveragingSimExperiment()
grid_search = GridSearchExperiment()
compare = CompareExperiment()
constraint_ablation = ConstraintAblationExperiment()

EXPERIMENTS = {
    experiment.name: experiment
    for experiment in (
        gen_data,
        train_registration,
        train_sequence,
        infer_sweep,
        icp_ablation,
        audit,
        landscape_slice,
        averaging_sim,
        grid_search,
        compare,
        constraint_ablation,
    )
}
