"""Experiments that measure landscapes or generate data without training."""
import logging
import os
from typing import Any, Dict

import numpy as np
import pandas as pd

from ..analyzer import SliceSpec, audit_star_convexity, estimate_lipschitz, simulate_averaging, slice_landscape
from ..errors import ConfigError
from ..harness.export import write_slice_svg
from ..tasks.oracles import AnalyticOracle
from ..tasks.pointcloud_io import write_dataset
from ..tasks.registration import RegistrationDataConfig, RegistrationTask
from ..tasks.sequence import SequenceTask
from .template_experiments.base_experiment import BaseExperimentTemplate

logger = logging.getLogger(__name__)

_MODEL_INPUTS = {
    "task": {"type": "string", "description": "Task id, e.g. oracle:quadratic or registration-2d", "default": "oracle:quadratic"},
    "task_options": {"type": "dict", "description": "Task constructor options", "nullable": True, "default": {}},
    "checkpoint": {"type": "string", "description": "Checkpoint with trained weights", "nullable": True},
    "data": {"type": "dict", "description": "Dataset generator settings", "nullable": True, "default": {}},
    "seed": {"type": "int", "description": "Seed for untrained weights, data and sampling", "default": 0},
}


class AuditExperiment(BaseExperimentTemplate):
    """Star-convexity audit around each audited ground truth."""

    name = "audit"
    description = "Violation rates of the star-convexity conditions, mu_hat and L_hat"
    inputs = {
        **_MODEL_INPUTS,
        "n_datapoints": {"type": "int", "description": "Datapoints audited", "default": 1},
        "n_rays": {"type": "int", "description": "Sampled rays per datapoint", "default": 64},
        "points_per_ray": {"type": "int", "description": "λ grid size per ray", "default": 8},
        "mu": {"type": "float", "description": "Sharpness μ tested", "default": 1.0},
        "audit_tol": {"type": "float", "description": "Hinge tolerance; 1e-9 for oracles, 1e-6 otherwise", "nullable": True},
        "sampler": {"type": "dict", "description": "Neighborhood sampler override", "nullable": True},
        "lipschitz_samples": {"type": "int", "description": "Samples for the L_hat estimate", "default": 64},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        task = self.build_task(config["task"], config["task_options"])
        params = self.load_params(task, config["checkpoint"], config["seed"])
        data_seed = self.data_seed(config["data"], config["seed"])
        samples = self.dataset(task, config["data"], data_seed)[: config["n_datapoints"]]
        audit_tol = config["audit_tol"]
        if audit_tol is None:
            audit_tol = 1e-9 if isinstance(task, AnalyticOracle) else 1e-6
        sampler = self.sampler(config["sampler"])
        rng = np.random.default_rng(config["seed"])
        self.write_seeds(out_dir, seed=config["seed"])

        frames, reports = [], []
        for index, sample in enumerate(samples):
            report = audit_star_convexity(
                task, sample.x, params, sample.omega_star, sampler,
                config["n_rays"], config["points_per_ray"], config["mu"], audit_tol, rng,
            )
            lipschitz = estimate_lipschitz(
                task, sample.x, params, sample.omega_star, sampler, config["lipschitz_samples"], rng
            )
            frame = report.to_frame()
            frame.insert(0, "datapoint", index)
            frames.append(frame)
            reports.append((report, lipschitz))
        self.write_table(pd.concat(frames, ignore_index=True), out_dir, "audit.csv")

        rates = {name: float(np.mean([r.rates[name] for r, _ in reports])) for name in reports[0][0].rates}
        summary = {
            "task": config["task"],
            "mu": config["mu"],
            "audit_tol": audit_tol,
            "n_datapoints": len(reports),
            "rates": rates,
            "max_hinges": {
                name: float(np.max([r.max_hinges[name] for r, _ in reports])) for name in reports[0][0].max_hinges
            },
            "mu_hat": float(np.min([r.mu_hat for r, _ in reports])),
            "mu_hat_capped": all(r.mu_hat_capped for r, _ in reports),
            "lipschitz_hat": float(np.max([lip for _, lip in reports])),
            "lipschitz_label": "empirical lower estimate",
        }
        if isinstance(task, AnalyticOracle):
            summary["mu_true"] = task.mu_true
        return summary


class SliceExperiment(BaseExperimentTemplate):
    """2-D loss slice around one ground truth."""

    name = "slice"
    description = "Loss grid over two prediction coordinates with local minima marked"
    inputs = {
        **_MODEL_INPUTS,
        "datapoint": {"type": "int", "description": "Index of the sliced datapoint", "default": 0},
        "dim_x": {"type": "int", "description": "First sliced coordinate", "default": 0},
        "dim_y": {"type": "int", "description": "Second sliced coordinate", "default": 1},
        "half_width": {"type": "float", "description": "Half width of both axes", "default": 1.0},
        "resolution": {"type": "int", "description": "Grid points per axis", "default": 41},
        "svg": {"type": "bool", "description": "Also write an SVG heatmap", "default": True},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        task = self.build_task(config["task"], config["task_options"])
        params = self.load_params(task, config["checkpoint"], config["seed"])
        samples = self.dataset(task, config["data"], self.data_seed(config["data"], config["seed"]))
        if not 0 <= config["datapoint"] < len(samples):
            raise ConfigError(f"datapoint {config['datapoint']} outside a dataset of {len(samples)}")
        sample = samples[config["datapoint"]]
        spec = SliceSpec(
            dim_x=config["dim_x"],
            dim_y=config["dim_y"],
            half_width=config["half_width"],
            resolution=config["resolution"],
            center=sample.omega_star,
        )
        result = slice_landscape(task, sample.x, params, spec)
        self.write_seeds(out_dir, seed=config["seed"])
        self.write_table(result.to_frame(), out_dir, "slice.csv")
        if config["svg"]:
            write_slice_svg(result, os.path.join(out_dir, "slice.svg"), title=config["task"])
        finite = result.losses[np.isfinite(result.losses)]
        center_index = (config["resolution"] // 2, config["resolution"] // 2)
        return {
            "task": config["task"],
            "center_loss": result.center_loss,
            "min_loss": float(finite.min()) if finite.size else None,
            "local_minima": [list(offset) for offset in result.minima_offsets()],
            "n_local_minima": len(result.local_minima),
            "center_is_local_minimum": center_index in result.local_minima,
            "n_invalid_cells": len(result.invalid),
        }


class AveragingSimExperiment(BaseExperimentTemplate):
    """Monte-Carlo MSE of averaged predictions versus the iteration count."""

    name = "averaging-sim"
    description = "MSE of running means of i.i.d. prediction errors with fitted log-log slope"
    inputs = {
        "T_max": {"type": "int", "description": "Largest iteration count", "default": 64},
        "error_std": {"type": "float", "description": "Per-coordinate error standard deviation", "default": 1.0},
        "omega_dim": {"type": "int", "description": "Prediction dimension", "default": 3},
        "n_trials": {"type": "int", "description": "Monte-Carlo trials", "default": 10000},
        "lipschitz": {"type": "float", "description": "L for the 4L²/(μ²T) curve", "nullable": True},
        "mu": {"type": "float", "description": "μ for the 4L²/(μ²T) curve", "nullable": True},
        "seed": {"type": "int", "description": "Error stream seed", "default": 0},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        curve = simulate_averaging(
            config["T_max"], config["error_std"], config["omega_dim"], config["n_trials"],
            np.random.default_rng(config["seed"]), lipschitz=config["lipschitz"], mu=config["mu"],
        )
        self.write_seeds(out_dir, seed=config["seed"])
        self.write_table(curve.to_frame(), out_dir, "averaging.csv")
        return {"slope": curve.slope, "mse_T1": float(curve.mse[0]), "mse_Tmax": float(curve.mse[-1])}


class GenerateDataExperiment(BaseExperimentTemplate):
    """Write a synthetic dataset to disk."""

    name = "gen-data"
    description = "Generate registration pairs (.xyz + ground-truth JSON) or random-walk sequences (CSV)"
    inputs = {
        "task": {"type": "string", "description": "registration-2d, registration-3d or sequence", "default": "registration-2d"},
        "data": {"type": "dict", "description": "Dataset generator settings", "nullable": True, "default": {}},
        "seed": {"type": "int", "description": "Generator seed", "default": 0},
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        task = self.build_task(config["task"], {})
        data = dict(config["data"] or {}, seed=config["seed"])
        self.write_seeds(out_dir, seed=config["seed"])
        if isinstance(task, RegistrationTask):
            cfg = RegistrationDataConfig.from_dict({"dim": task.dim, **data})
            samples = task.generate_dataset(cfg)
            ids = write_dataset([s.x for s in samples], os.path.join(out_dir, "pairs"), cfg)
            return {"task": config["task"], "n_pairs": len(ids), "directory": "pairs"}
        if isinstance(task, SequenceTask):
            samples = task.generate_dataset(data)
            rows = [
                {"sample": i, "label": s.x.label, **{f"x_{t}": v for t, v in enumerate(s.x.sequence[:, 0])}}
                for i, s in enumerate(samples)
            ]
            self.write_table(pd.DataFrame(rows), out_dir, "sequences.csv")
            return {"task": config["task"], "n_samples": len(rows)}
        raise ConfigError(f"gen-data does not support task '{config['task']}'")
