"""Experiments that train models: single runs, paired DLC/baseline comparison, grid search and constraint ablation."""
import itertools
import logging
import os
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from ..analyzer import audit_star_convexity
from ..convexification import CONSTRAINTS
from ..errors import ConfigError
from ..harness.checkpoint import save_checkpoint
from ..harness.config import TrainConfig, deep_merge
from ..harness.training import Trainer
from ..tasks.base_task import Sample, Task
from .template_experiments.base_experiment import TEST_SEED_OFFSET, BaseExperimentTemplate

logger = logging.getLogger(__name__)

_TRAIN_INPUTS = {
    "train": {
        "type": "dict",
        "description": "TrainConfig fields (may name a preset)",
        "nullable": True,
        "default": {},
    },
    "seed": {
        "type": "int",
        "description": "Master seed, overrides train.seed",
        "default": 0,
    },
    "n_test": {
        "type": "int",
        "description": "Held-out datapoints evaluated after training",
        "default": 50,
    },
}


def _train_config(train: Dict[str, Any], seed: int, default_task: str, **overrides: Any) -> TrainConfig:
    data = dict(train or {})
    if "task" not in data and "preset" not in data:
        data["task"] = default_task
    return TrainConfig.from_dict(deep_merge(data, {"seed": seed, **overrides}))


HISTORY_COLUMNS = ["epoch", "step", "index", "total", "base", "hinge", *CONSTRAINTS]


def _history_frame(history: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(history, columns=HISTORY_COLUMNS)


def _splits(experiment: BaseExperimentTemplate, trainer: Trainer, n_test: int) -> Tuple[int, List[Sample], List[Sample]]:
    """Data seed, training set and held-out set of one training run."""
    cfg = trainer.cfg
    data_seed = experiment.data_seed(cfg.data, cfg.seed)
    train_set = experiment.dataset(trainer.task, cfg.data, data_seed)
    test_set = experiment.dataset(
        trainer.task, cfg.data, data_seed + TEST_SEED_OFFSET, size=n_test, directory_key="test_dir"
    )
    return data_seed, train_set, test_set


class TrainExperiment(BaseExperimentTemplate):
    """Train one model, save it and evaluate held-out inference."""

    name = "train-registration"
    description = "Train the registration loss network and report MSE(R), MSE(Euler), MSE(T)"
    default_task = "registration-2d"
    inputs = dict(_TRAIN_INPUTS)

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        cfg = _train_config(config["train"], config["seed"], self.default_task)
        trainer = Trainer(cfg)
        data_seed, train_set, test_set = _splits(self, trainer, config["n_test"])
        self.write_seeds(
            out_dir, seed=cfg.seed, data_seed=data_seed, test_seed=data_seed + TEST_SEED_OFFSET,
            streams=["init", "shuffle", "sample"],
        )

        checkpoint = trainer.fit(train_set)
        save_checkpoint(checkpoint, os.path.join(out_dir, "model.ckpt"))
        self.write_table(_history_frame(checkpoint.history), out_dir, "history.csv")

        metrics, _ = self.evaluate(trainer.task, checkpoint.params, test_set, cfg.inference)
        self.metadata["mean_step_time_s"] = float(np.mean(trainer.step_times))
        last = checkpoint.history[-1]
        return {
            "task": cfg.task,
            "use_dlc": cfg.use_dlc,
            "epochs": cfg.epochs,
            "n_train": len(train_set),
            "n_test": len(test_set),
            "final_base_loss": last["base"],
            "final_hinge": last["hinge"],
            "final_hinge_terms": {name: last[name] for name in CONSTRAINTS},
            "test": metrics,
            "checkpoint": "model.ckpt",
        }


class TrainSequenceExperiment(TrainExperiment):
    name = "train-sequence"
    description = "Train the tiny RNN classifier and report held-out accuracy"
    default_task = "sequence"
    inputs = dict(_TRAIN_INPUTS)
    inputs["train"] = dict(_TRAIN_INPUTS["train"], default={"preset": "sequence-sgd"})


def _con2_rate(task: Task, params, samples: List[Sample], n_rays: int, points_per_ray: int, mu: float, seed: int) -> float:
    """Mean con2 violation rate over ``samples`` with learned-loss tolerance."""
    rng = np.random.default_rng(seed)
    rates = [
        audit_star_convexity(
            task, sample.x, params, sample.omega_star, None, n_rays, points_per_ray, mu, 1e-6, rng
        ).rates["con2"]
        for sample in samples
    ]
    return float(np.mean(rates))


_AUDIT_INPUTS = {
    "n_rays": {"type": "int", "description": "Rays per audited test datapoint", "default": 16},
    "points_per_ray": {"type": "int", "description": "λ grid size per ray", "default": 2},
    "audit_mu": {"type": "float", "description": "μ used by the con2 audit", "default": 1.0},
    "n_audit": {"type": "int", "description": "Test datapoints audited", "default": 10},
}


class CompareExperiment(BaseExperimentTemplate):
    """Paired DLC and baseline training on identical seeds."""

    name = "compare"
    description = "Train DLC and baseline models per seed; compare con2 violation rates and test MSE(Euler)"
    inputs = {
        "train": _TRAIN_INPUTS["train"],
        "seeds": {"type": "list", "description": "Seeds trained for both models", "default": [0, 1, 2]},
        "n_test": _TRAIN_INPUTS["n_test"],
        **_AUDIT_INPUTS,
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        rows = []
        step_times = {"dlc": [], "baseline": []}
        for seed in config["seeds"]:
            for model, use_dlc in (("dlc", True), ("baseline", False)):
                cfg = _train_config(config["train"], int(seed), "registration-2d", use_dlc=use_dlc)
                trainer = Trainer(cfg)
                _, train_set, test_set = _splits(self, trainer, config["n_test"])
                checkpoint = trainer.fit(train_set)
                step_times[model].extend(trainer.step_times)
                metrics, _ = self.evaluate(trainer.task, checkpoint.params, test_set, cfg.inference)
                con2 = _con2_rate(
                    trainer.task, checkpoint.params, test_set[: config["n_audit"]],
                    config["n_rays"], config["points_per_ray"], config["audit_mu"], int(seed),
                )
                logger.info("compare seed %s %s: con2 %.4f, test %s", seed, model, con2, metrics)
                rows.append({"seed": int(seed), "model": model, "con2_rate": con2, **metrics})

        frame = pd.DataFrame(rows)
        self.write_table(frame, out_dir, "compare.csv")
        self.write_seeds(out_dir, seeds=[int(s) for s in config["seeds"]])
        medians = frame.groupby("model").median(numeric_only=True).drop(columns="seed")
        dlc_time, base_time = np.mean(step_times["dlc"]), np.mean(step_times["baseline"])
        self.metadata["training_time_ratio"] = float(dlc_time / base_time) if base_time > 0 else None
        summary = {"medians": medians.to_dict(orient="index")}
        if "mse_euler_deg" in medians.columns:
            summary["dlc_mse_euler_le_baseline"] = bool(
                medians.loc["dlc", "mse_euler_deg"] <= medians.loc["baseline", "mse_euler_deg"]
            )
        summary["dlc_con2_le_baseline"] = bool(medians.loc["dlc", "con2_rate"] <= medians.loc["baseline", "con2_rate"])
        return summary


class GridSearchExperiment(BaseExperimentTemplate):
    """Serial sweep over (ρ, λ, μ, constraint subset) in a fixed product order."""

    name = "grid-search"
    description = "Train one model per (rho, lambda, mu, constraints) combination and tabulate test metrics"
    table_name = "grid.csv"
    inputs = {
        "train": _TRAIN_INPUTS["train"],
        "seed": _TRAIN_INPUTS["seed"],
        "n_test": _TRAIN_INPUTS["n_test"],
        "rho": {"type": "list", "description": "ρ values", "default": [0.2, 0.6, 1.0]},
        "lambda": {"type": "list", "description": "λ values", "default": [0.5]},
        "mu": {"type": "list", "description": "μ values", "default": [1.0, 4.0]},
        "constraints": {
            "type": "list",
            "description": "Constraint subsets trained with, e.g. [[\"con1\", \"con2\"]]",
            "default": [list(CONSTRAINTS)],
        },
        "selection_metric": {"type": "string", "description": "Column minimized to pick the best row", "default": "final_loss"},
        **_AUDIT_INPUTS,
    }

    def forward(self, config: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        rows = []
        grid = itertools.product(config["rho"], config["lambda"], config["mu"], config["constraints"])
        for rho, lam, mu, constraints in grid:
            overrides = {"dlc": {"rho": rho, "lambda": lam, "mu": mu, "constraints": constraints}}
            train = deep_merge(config["train"] or {}, overrides)
            cfg = _train_config(train, config["seed"], "registration-2d")
            trainer = Trainer(cfg)
            _, train_set, test_set = _splits(self, trainer, config["n_test"])
            checkpoint = trainer.fit(train_set)
            metrics, _ = self.evaluate(trainer.task, checkpoint.params, test_set, cfg.inference)
            con2 = _con2_rate(
                trainer.task, checkpoint.params, test_set[: config["n_audit"]],
                config["n_rays"], config["points_per_ray"], config["audit_mu"], config["seed"],
            )
            label = "+".join(cfg.dlc.constraints)
            rows.append({"rho": rho, "lambda": lam, "mu": mu, "constraints": label, "con2_rate": con2, **metrics})
            logger.info("grid point rho=%g lambda=%g mu=%g constraints=%s: %s", rho, lam, mu, label, metrics)

        frame = pd.DataFrame(rows)
        self.write_table(frame, out_dir, self.table_name)
        self.write_seeds(out_dir, seed=config["seed"])
        metric = config["selection_metric"]
        if metric not in frame.columns:
            raise ConfigError(f"selection_metric '{metric}' is not one of {list(frame.columns)}")
        best = frame.loc[frame[metric].idxmin()].to_dict()
        return {"n_combinations": len(rows), "selection_metric": metric, "best": best}


def _constraint_subsets() -> List[List[str]]:
    """Every non-empty subset of the constraints, smallest first."""
    return [
        list(subset)
        for size in range(1, len(CONSTRAINTS) + 1)
        for subset in itertools.combinations(CONSTRAINTS, size)
    ]


class ConstraintAblationExperiment(GridSearchExperiment):
    """Grid search over constraint subsets at one (ρ, λ, μ)."""

    name = "constraint-ablation"
    description = "Train one model per non-empty subset of {con1, con2, con3} and tabulate test metrics"
    table_name = "ablation.csv"
    inputs = dict(GridSearchExperiment.inputs)
    inputs["rho"] = dict(GridSearchExperiment.inputs["rho"], default=[0.6])
    inputs["mu"] = dict(GridSearchExperiment.inputs["mu"], default=[1.0])
    inputs["constraints"] = dict(GridSearchExperiment.inputs["constraints"], default=_constraint_subsets())
