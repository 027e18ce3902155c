"""Experiments over test-time inference: iteration sweeps and ICP refinement."""
import logging
from typing import Any, Dict

import numpy as np
import pandas as pd

from ..errors import ConfigError
from ..harness.metrics import registration_metrics
from ..inference import InferenceConfig, icp_refine, infer
from ..tasks.registration import RegistrationTask
from .template_experiments.base_experiment import TEST_SEED_OFFSET, BaseExperimentTemplate

logger = logging.getLogger(__name__)

_INFERENCE_INPUTS = {
    "task": {"type": "string", "description": "Task id", "default": "registration-2d"},
    "task_options": {"type": "dict", "description": "Task constructor options", "nullable": True, "default": {}},
    "checkpoint": {"type": "string", "description": "Checkpoint with trained weights", "nullable": True},
    "data": {"type": "dict", "description": "Dataset generator settings", "nullable": True, "default": {}},
    "n_test": {"type": "int", "description": "Held-out datapoints", "default": 50},
    "inference": {"type": "dict", "description": "InferenceConfig fields", "nullable": True, "default": {}},
    "seed": {"type": "int", "description": "Seed for untrained weights and data", "default": 0},
}


class InferSweepExperiment(BaseExperimentTemplate):
    """Error versus iteration budget T for both inference modes."""

    name = "infer-sweep"
    description = "Test error as a function of the test-time iteration budget"
    inputs = {
        **_INFERENCE_INPUTS,
        "T_values": {"type": "list", "description": "Iteration budgets evaluated", "default": [1, 2, 3, 4, 5]},
        "modes": {"type": "list", "description": "Inference modes evaluated", "default": ["last-iterate", "averaged"]},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        task = self.build_task(config["task"], config["task_options"])
        params = self.load_params(task, config["checkpoint"], config["seed"])
        test_seed = self.data_seed(config["data"], config["seed"]) + TEST_SEED_OFFSET
        samples = self.dataset(task, config["data"], test_seed, size=config["n_test"])
        self.write_seeds(out_dir, seed=config["seed"], test_seed=test_seed)
        t_values = sorted(int(t) for t in config["T_values"])
        if not t_values or t_values[0] < 1:
            raise ConfigError(f"T_values must be positive integers, got {config['T_values']}")

        rows = []
        for mode in config["modes"]:
            cfg = InferenceConfig.from_dict({**(config["inference"] or {}), "mode": mode, "max_iters": t_values[-1]})
            runs = [infer(task, sample.x, params, cfg) for sample in samples]
            # a budget-t run is the prefix of the longest run
            for t in t_values:
                predictions = [traj.iterates[min(t, len(traj) - 1)] for _, traj in runs]
                row = {"mode": mode, "T": t}
                row["loss"] = float(np.mean([traj.losses[min(t, len(traj) - 1)] for _, traj in runs]))
                if isinstance(task, RegistrationTask):
                    row.update(registration_metrics(predictions, [s.omega_star for s in samples]))
                rows.append(row)
            self.write_table(runs[0][1].to_frame(include_wall_time=False), out_dir, f"trajectory_{mode}.csv")
            self.metadata[f"wall_time_us_{mode}"] = [
                int(round(w * 1e6)) for w in runs[0][1].wall_times
            ]

        frame = pd.DataFrame(rows)
        self.write_table(frame, out_dir, "sweep.csv")
        return {"rows": frame.to_dict(orient="records")}


class IcpAblationExperiment(BaseExperimentTemplate):
    """Network predictions with and without ICP refinement."""

    name = "icp-ablation"
    description = "Registration metrics without and with ICP refinement of the predictions"
    inputs = {
        **_INFERENCE_INPUTS,
        "icp_iters": {"type": "int", "description": "ICP iteration cap", "default": 20},
        "icp_tol": {"type": "float", "description": "ICP objective-decrease tolerance", "default": 1e-10},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        task = self.build_task(config["task"], config["task_options"])
        if not isinstance(task, RegistrationTask):
            raise ConfigError("icp-ablation needs a registration task")
        params = self.load_params(task, config["checkpoint"], config["seed"])
        test_seed = self.data_seed(config["data"], config["seed"]) + TEST_SEED_OFFSET
        samples = self.dataset(task, config["data"], test_seed, size=config["n_test"])
        self.write_seeds(out_dir, seed=config["seed"], test_seed=test_seed)
        cfg = InferenceConfig.from_dict(config["inference"] or {})

        truths = [s.omega_star for s in samples]
        predictions, refined, icp_only, pair_rows = [], [], [], []
        for index, sample in enumerate(samples):
            omega_hat, _ = infer(task, sample.x, params, cfg)
            result = icp_refine(sample.x, omega_hat, config["icp_iters"], config["icp_tol"])
            predictions.append(omega_hat)
            refined.append(result.motion.to_prediction())
            baseline = icp_refine(sample.x, task.initial_omega(sample.x), config["icp_iters"], config["icp_tol"])
            icp_only.append(baseline.motion.to_prediction())
            losses = result.trajectory.losses
            pair_rows.append({
                "pair": index,
                "icp_iters": result.n_iters,
                "converged": result.converged,
                "degenerate": result.degenerate,
                "objective_start": losses[0],
                "objective_end": losses[-1],
                "monotone": bool(np.all(np.diff(losses) <= 1e-12)),
            })

        table = pd.DataFrame([
            {"refinement": "w/o ICP", **registration_metrics(predictions, truths)},
            {"refinement": "with ICP", **registration_metrics(refined, truths)},
            {"refinement": "ICP from identity", **registration_metrics(icp_only, truths)},
        ])
        self.write_table(table, out_dir, "icp_table.csv")
        self.write_table(pd.DataFrame(pair_rows), out_dir, "icp_pairs.csv")
        return {
            "table": table.to_dict(orient="records"),
            "all_monotone": all(row["monotone"] for row in pair_rows),
            "n_degenerate": sum(row["degenerate"] for row in pair_rows),
        }
