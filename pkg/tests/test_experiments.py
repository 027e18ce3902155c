import json
import os

import pandas as pd
import pytest

from loss_convexification.cli import build_parser, main
from loss_convexification.experiments import EXPERIMENTS, BaseExperimentTemplate, ExperimentRunner, run_experiment
from loss_convexification.errors import ConfigError

REGISTRATION = {"task_options": {"width": 4, "feature_dim": 3}, "data": {"n_points": 8}, "n_test": 2}
TRAIN = {"task_options": {"width": 4, "feature_dim": 3}, "data": {"n_pairs": 4, "n_points": 8}, "epochs": 1}


def ok(result):
    assert result["status"] == "success", result
    return result["summary"]


class TestTemplate:
    def test_defaults_are_filled(self):
        resolved = EXPERIMENTS["audit"].validate({})
        assert resolved["task"] == "oracle:quadratic"
        assert resolved["n_rays"] == 64
        assert resolved["audit_tol"] is None

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            EXPERIMENTS["audit"].validate({"n_rays": "many"})

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError):
            EXPERIMENTS["audit"].validate({"n_rays": True})

    def test_invalid_schema(self):
        class Broken(BaseExperimentTemplate):
            name = "broken"
            inputs = {"level": {"type": "complex", "description": "nope"}}

        with pytest.raises(ConfigError):
            Broken()


class TestRunner:
    def test_audit_on_quadratic(self, tmp_path):
        summary = ok(run_experiment("audit", {"task": "oracle:quadratic"}, str(tmp_path)))
        assert all(rate == 0.0 for rate in summary["rates"].values())
        assert summary["mu_true"] == 2.0
        for name in ("audit.csv", "config.json", "seeds.json", "summary.json", "metadata.json"):
            assert (tmp_path / name).exists()

    def test_artifacts_are_reproducible(self, tmp_path):
        config = {"task": "oracle:double-well", "n_rays": 16, "points_per_ray": 4}
        run_experiment("audit", config, str(tmp_path / "a"))
        run_experiment("audit", config, str(tmp_path / "b"))
        for name in ("audit.csv", "config.json", "seeds.json", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override(self, tmp_path):
        run_experiment("audit", {"n_rays": 4}, str(tmp_path), seed=7)
        assert json.loads((tmp_path / "seeds.json").read_text()) == {"seed": 7}

    def test_unknown_experiment(self, tmp_path):
        result = run_experiment("fine-tune", {}, str(tmp_path))
        assert result["status"] == "error"
        assert result["kind"] == "config"

    def test_unknown_field(self, tmp_path):
        result = run_experiment("audit", {"rays": 4}, str(tmp_path))
        assert result["kind"] == "config"

    def test_missing_checkpoint(self, tmp_path):
        result = run_experiment("audit", {"task": "registration-2d", "checkpoint": str(tmp_path / "x.ckpt")}, str(tmp_path))
        assert result["kind"] == "checkpoint"

    def test_custom_registry(self, tmp_path):
        runner = ExperimentRunner({"only-audit": EXPERIMENTS["audit"]})
        assert runner.run_experiment("audit", {}, str(tmp_path))["status"] == "error"
        assert runner.run_experiment("only-audit", {"n_rays": 2}, str(tmp_path))["status"] == "success"


class TestAnalysisExperiments:
    def test_slice(self, tmp_path):
        summary = ok(run_experiment("slice", {"task": "oracle:quadratic", "resolution": 11}, str(tmp_path)))
        assert summary["center_is_local_minimum"]
        assert summary["n_local_minima"] == 1
        assert len(pd.read_csv(tmp_path / "slice.csv")) == 121
        assert (tmp_path / "slice.svg").exists()

    def test_slice_of_flat_landscape(self, tmp_path):
        summary = ok(run_experiment("slice", {"task": "oracle:flat", "resolution": 5}, str(tmp_path)))
        assert summary["n_local_minima"] == 0

    def test_averaging_simulation(self, tmp_path):
        summary = ok(run_experiment("averaging-sim", {"T_max": 16, "n_trials": 2000}, str(tmp_path)))
        assert summary["mse_Tmax"] < summary["mse_T1"]
        assert len(pd.read_csv(tmp_path / "averaging.csv")) == 16

    def test_generate_registration_pairs(self, tmp_path):
        summary = ok(run_experiment("gen-data", {"data": {"n_pairs": 3, "n_points": 8}}, str(tmp_path)))
        assert summary["n_pairs"] == 3
        assert sorted(os.listdir(tmp_path / "pairs"))[:3] == ["00000_gt.json", "00000_src.xyz", "00000_tgt.xyz"]

    def test_generate_sequences(self, tmp_path):
        config = {"task": "sequence", "data": {"n_samples": 3, "steps": 4}}
        ok(run_experiment("gen-data", config, str(tmp_path)))
        frame = pd.read_csv(tmp_path / "sequences.csv")
        assert list(frame.columns) == ["sample", "label", "x_0", "x_1", "x_2", "x_3"]

    def test_generate_for_oracle_is_rejected(self, tmp_path):
        assert run_experiment("gen-data", {"task": "oracle:flat"}, str(tmp_path))["kind"] == "config"


class TestTrainingExperiments:
    def test_train_then_infer(self, tmp_path):
        summary = ok(run_experiment("train-registration", {"train": TRAIN, "n_test": 2}, str(tmp_path / "train")))
        assert summary["n_train"] == 4
        assert "mse_euler_deg" in summary["test"]
        checkpoint = str(tmp_path / "train" / "model.ckpt")
        assert os.path.exists(checkpoint)
        history = pd.read_csv(tmp_path / "train" / "history.csv")
        assert len(history) == 4
        assert list(history.columns) == ["epoch", "step", "index", "total", "base", "hinge", "con1", "con2", "con3"]
        assert set(summary["final_hinge_terms"]) == {"con1", "con2", "con3"}

        ok(run_experiment("infer-sweep", {**REGISTRATION, "checkpoint": checkpoint}, str(tmp_path / "infer")))
        sweep = pd.read_csv(tmp_path / "infer" / "sweep.csv")
        assert len(sweep) == 10
        assert set(sweep["mode"]) == {"last-iterate", "averaged"}
        assert "wall_time_us" not in pd.read_csv(tmp_path / "infer" / "trajectory_averaged.csv").columns

    def test_train_sequence(self, tmp_path):
        train = {"task_options": {"hidden": 3}, "data": {"n_samples": 4, "steps": 4}, "epochs": 1}
        summary = ok(run_experiment("train-sequence", {"train": train, "n_test": 2}, str(tmp_path)))
        assert summary["task"] == "sequence"
        assert 0.0 <= summary["test"]["accuracy"] <= 1.0

    def test_icp_ablation(self, tmp_path):
        summary = ok(run_experiment("icp-ablation", REGISTRATION, str(tmp_path)))
        table = pd.read_csv(tmp_path / "icp_table.csv")
        assert list(table["refinement"]) == ["w/o ICP", "with ICP", "ICP from identity"]
        assert summary["all_monotone"]

    def test_icp_needs_registration(self, tmp_path):
        result = run_experiment("icp-ablation", {"task": "oracle:quadratic"}, str(tmp_path))
        assert result["kind"] == "config"

    def test_grid_search(self, tmp_path):
        config = {
            "train": TRAIN, "n_test": 2, "rho": [0.0, 1.0], "lambda": [0.5], "mu": [1.0],
            "n_audit": 1, "n_rays": 2,
        }
        summary = ok(run_experiment("grid-search", config, str(tmp_path)))
        assert summary["n_combinations"] == 2
        assert len(pd.read_csv(tmp_path / "grid.csv")) == 2

    def test_grid_search_rejects_unknown_metric(self, tmp_path):
        config = {"train": TRAIN, "n_test": 1, "rho": [0.0], "lambda": [0.5], "mu": [1.0], "n_audit": 1,
                  "n_rays": 2, "selection_metric": "f1"}
        assert run_experiment("grid-search", config, str(tmp_path))["kind"] == "config"

    def test_constraint_ablation(self, tmp_path):
        config = {"train": TRAIN, "n_test": 1, "n_audit": 1, "n_rays": 2}
        summary = ok(run_experiment("constraint-ablation", config, str(tmp_path)))
        assert summary["n_combinations"] == 7
        table = pd.read_csv(tmp_path / "ablation.csv")
        assert list(table["constraints"]) == [
            "con1", "con2", "con3", "con1+con2", "con1+con3", "con2+con3", "con1+con2+con3",
        ]
        assert set(table["rho"]) == {0.6}

    def test_grid_search_over_constraint_subsets(self, tmp_path):
        config = {
            "train": TRAIN, "n_test": 1, "rho": [0.5], "lambda": [0.5], "mu": [1.0],
            "constraints": [["con2"], ["con3", "con1"]], "n_audit": 1, "n_rays": 2,
        }
        ok(run_experiment("grid-search", config, str(tmp_path)))
        assert list(pd.read_csv(tmp_path / "grid.csv")["constraints"]) == ["con2", "con1+con3"]

    def test_grid_search_rejects_unknown_constraint(self, tmp_path):
        config = {"train": TRAIN, "n_test": 1, "rho": [0.5], "lambda": [0.5], "mu": [1.0],
                  "constraints": [["con9"]], "n_audit": 1, "n_rays": 2}
        assert run_experiment("grid-search", config, str(tmp_path))["kind"] == "config"

    def test_train_on_generated_pair_files(self, tmp_path):
        ok(run_experiment("gen-data", {"data": {"n_pairs": 5, "n_points": 8}}, str(tmp_path / "train_data"), seed=1))
        ok(run_experiment("gen-data", {"data": {"n_pairs": 3, "n_points": 8}}, str(tmp_path / "test_data"), seed=2))
        train = dict(TRAIN, data={"dir": str(tmp_path / "train_data" / "pairs"), "test_dir": str(tmp_path / "test_data" / "pairs")})
        summary = ok(run_experiment("train-registration", {"train": train, "n_test": 2}, str(tmp_path / "run")))
        assert summary["n_train"] == 5
        assert summary["n_test"] == 2

    def test_pair_directory_needs_registration_task(self, tmp_path):
        train = {"task_options": {"hidden": 3}, "data": {"dir": str(tmp_path)}, "epochs": 1}
        result = run_experiment("train-sequence", {"train": train, "n_test": 2}, str(tmp_path / "run"))
        assert result["kind"] == "config"

    def test_icp_does_not_increase_translation_error(self, tmp_path):
        config = {
            "task_options": {"width": 4, "feature_dim": 3},
            "data": {"n_points": 16, "angle_range": 0.087, "trans_range": 0.05, "shapes": ["box", "gaussians"]},
            "inference": {"max_iters": 2, "step_size": 0.001},
            "n_test": 10,
        }
        ok(run_experiment("icp-ablation", config, str(tmp_path)))
        table = pd.read_csv(tmp_path / "icp_table.csv").set_index("refinement")
        assert table.loc["with ICP", "mse_translation"] <= table.loc["w/o ICP", "mse_translation"]

    @pytest.mark.slow
    def test_compare_favours_convexified_model(self, tmp_path):
        train = {
            "task_options": {"width": 8, "feature_dim": 4},
            "data": {"n_pairs": 200, "n_points": 16},
            "epochs": 2,
            "inference": {"max_iters": 5},
        }
        config = {"train": train, "seeds": [0, 1, 2], "n_test": 50, "n_audit": 10}
        summary = ok(run_experiment("compare", config, str(tmp_path)))
        medians = summary["medians"]
        assert medians["dlc"]["con2_rate"] <= medians["baseline"]["con2_rate"]
        assert medians["dlc"]["mse_euler_deg"] <= medians["baseline"]["mse_euler_deg"]
        assert summary["dlc_con2_le_baseline"] is True
        assert summary["dlc_mse_euler_le_baseline"] is True
        assert len(pd.read_csv(tmp_path / "compare.csv")) == 6


class TestCli:
    def test_audit_command(self, tmp_path, capsys):
        assert main(["audit", "--out", str(tmp_path), "--seed", "3", "--log-level", "WARNING"]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["status"] == "success"
        assert record["experiment"] == "audit"

    def test_malformed_config_file(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text("{not json")
        assert main(["audit", "--config", str(config), "--out", str(tmp_path / "run")]) == 2
        assert json.loads(capsys.readouterr().out)["kind"] == "config"

    def test_invalid_training_config(self, tmp_path):
        config = tmp_path / "train.json"
        config.write_text(json.dumps({"train": {"epochs": 0}}))
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 2

    def test_sweep_experiment_choice(self, tmp_path):
        config = tmp_path / "grid.json"
        config.write_text(json.dumps({"train": TRAIN, "n_test": 1, "rho": [0.5], "lambda": [0.5], "mu": [1.0],
                                      "n_audit": 1, "n_rays": 2}))
        argv = ["sweep", "--experiment", "grid-search", "--config", str(config), "--out", str(tmp_path / "run")]
        assert main(argv) == 0
        assert (tmp_path / "run" / "grid.csv").exists()

    def test_icp_reads_pairs_from_data_directory(self, tmp_path, capsys):
        gen_config = tmp_path / "gen.json"
        gen_config.write_text(json.dumps({"data": {"n_pairs": 4, "n_points": 8}}))
        assert main(["gen-data", "--config", str(gen_config), "--out", str(tmp_path / "gen"), "--seed", "5"]) == 0
        capsys.readouterr()
        config = tmp_path / "icp.json"
        config.write_text(json.dumps({"task_options": {"width": 4, "feature_dim": 3}, "n_test": 3}))
        argv = ["icp", "--config", str(config), "--data", str(tmp_path / "gen" / "pairs"), "--out", str(tmp_path / "icp")]
        assert main(argv) == 0
        assert len(pd.read_csv(tmp_path / "icp" / "icp_pairs.csv")) == 3
        assert json.loads((tmp_path / "icp" / "config.json").read_text())["data"]["dir"] == str(tmp_path / "gen" / "pairs")

    def test_ablation_is_a_sweep_choice(self):
        args = build_parser().parse_args(["sweep", "--experiment", "constraint-ablation"])
        assert args.experiment == "constraint-ablation"
