import math
import os

import numpy as np
import pytest

from loss_convexification.autodiff import ParamSet, check_gradient, forward
from loss_convexification.errors import ConfigError, DegenerateGeometryError, LayoutError, ShapeMismatchError
from loss_convexification.tasks import (
    RegistrationTask,
    RigidMotion,
    SequenceSample,
    SequenceTask,
    analytic_oracles,
    apply_transform,
    build_task,
    generate_registration_dataset,
    registration_loss,
    rotation_matrix,
)
from loss_convexification.tasks.geometry import euler_from_rotation
from loss_convexification.tasks.pointcloud_io import load_or_generate, read_dataset, write_dataset
from loss_convexification.tasks.registration import RegistrationDataConfig
from loss_convexification.tasks.sequence import predict_distribution


def straight_line_features(task, points, params):
    hidden = np.tanh(points @ params["phi.w1"] + params["phi.b1"])
    local = np.tanh(hidden @ params["phi.w2"] + params["phi.b2"])
    return np.hstack([local, np.broadcast_to(local.max(axis=0), local.shape)])


class TestGeometry:
    def test_quarter_turn_in_2d(self):
        assert np.allclose(rotation_matrix(math.pi / 2), [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)

    def test_zyx_order_in_3d(self):
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(rotation_matrix([math.pi / 2, 0.0, 0.0]), expected, atol=1e-15)

    def test_identity_motion_leaves_points(self):
        points = np.random.default_rng(0).standard_normal((5, 3))
        assert np.array_equal(apply_transform(points, RigidMotion.identity(3)), points)

    def test_transform_then_inverse(self):
        points = np.random.default_rng(1).standard_normal((6, 3))
        motion = RigidMotion([0.3, -0.2, 0.5], [1.0, -2.0, 0.5])
        back = apply_transform(apply_transform(points, motion), motion.inverse())
        assert np.allclose(back, points, atol=1e-12)

    def test_unit_square_rotation(self):
        square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        moved = apply_transform(square, RigidMotion([math.pi / 2], [0.0, 0.0]))
        assert np.allclose(moved, [[0.0, 0.0], [0.0, 1.0], [-1.0, 1.0], [-1.0, 0.0]], atol=1e-15)

    def test_rotations_are_rigid(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            rotation = rotation_matrix(rng.uniform(-math.pi, math.pi, size=3))
            assert np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
            assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_euler_round_trip(self):
        euler = np.array([0.4, -0.3, 1.2])
        assert np.allclose(euler_from_rotation(rotation_matrix(euler)), euler, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_transform(np.zeros((4, 2)), RigidMotion.identity(3))


class TestRegistrationData:
    def test_targets_are_exact_motions(self):
        for pair in generate_registration_dataset({"n_pairs": 10, "n_points": 16, "dim": 3, "seed": 0}):
            assert pair.residual() < 1e-12

    def test_zero_ranges_give_identity(self):
        pairs = generate_registration_dataset({"n_pairs": 5, "angle_range": 0.0, "trans_range": 0.0})
        for pair in pairs:
            assert not np.any(pair.omega_star.values)

    def test_same_seed_same_pairs(self):
        first = generate_registration_dataset({"n_pairs": 3, "seed": 4})
        second = generate_registration_dataset({"n_pairs": 3, "seed": 4})
        for a, b in zip(first, second):
            assert np.array_equal(a.source, b.source)
            assert np.array_equal(a.target, b.target)
            assert np.array_equal(a.correspondence, b.correspondence)

    def test_partial_overlap_keeps_fraction(self):
        (pair,) = generate_registration_dataset({"n_pairs": 1, "n_points": 20, "partial_overlap_fraction": 0.5})
        assert pair.target.shape[0] == 10
        assert len(set(pair.correspondence.tolist())) == 10

    def test_too_few_points(self):
        with pytest.raises(DegenerateGeometryError):
            generate_registration_dataset({"n_pairs": 1, "n_points": 3, "dim": 3})

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            generate_registration_dataset({"n_pair": 1})

    def test_files_are_deterministic(self, tmp_path):
        pairs = generate_registration_dataset({"n_pairs": 2, "n_points": 8})
        write_dataset(pairs, str(tmp_path / "a"))
        write_dataset(generate_registration_dataset({"n_pairs": 2, "n_points": 8}), str(tmp_path / "b"))
        for name in sorted(os.listdir(tmp_path / "a")):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        restored = read_dataset(str(tmp_path / "a"))
        assert [p.pair_id for p in restored] == [p.pair_id for p in pairs]
        assert np.array_equal(restored[0].target, pairs[0].target)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_sphere_points_share_one_radius(self, dim):
        pairs = generate_registration_dataset({"n_pairs": 4, "n_points": 24, "dim": dim, "shapes": ["sphere"]})
        for pair in pairs:
            radii = np.linalg.norm(pair.source, axis=1)
            assert np.allclose(radii, radii[0], rtol=1e-12)
            assert 0.5 <= radii[0] <= 1.0

    def test_load_or_generate(self, tmp_path):
        cfg = RegistrationDataConfig(n_pairs=3, n_points=8, seed=2)
        generated = load_or_generate(cfg)
        write_dataset(generated, str(tmp_path), cfg)
        loaded = load_or_generate(str(tmp_path))
        assert [p.pair_id for p in loaded] == ["00000", "00001", "00002"]
        for a, b in zip(generated, loaded):
            assert np.array_equal(a.source, b.source)
            assert np.array_equal(a.omega_star.values, b.omega_star.values)
            assert np.array_equal(a.correspondence, b.correspondence)

    def test_load_from_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            load_or_generate(str(tmp_path / "nothing"))


class TestRegistrationLoss:
    def test_bypass_is_zero_at_ground_truth(self):
        (pair,) = generate_registration_dataset({"n_pairs": 1, "n_points": 12})
        builder = registration_loss(pair, ParamSet(), pair.omega_star)
        loss, _ = forward(builder, (), ParamSet(), pair.omega_star)
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_bypass_translation_offset(self):
        (pair,) = generate_registration_dataset({"n_pairs": 1, "n_points": 12})
        offset = pair.omega_star.values.copy()
        offset[1] += 0.3
        builder = registration_loss(pair, ParamSet(), pair.omega_star)
        loss, _ = forward(builder, (), ParamSet(), offset)
        assert loss == pytest.approx(0.09, rel=1e-12)

    def test_network_matches_straight_line(self, small_registration):
        task, params, samples = small_registration
        pair = samples[0].x
        omega = samples[0].omega_star.values + np.array([0.1, -0.05, 0.02])
        loss, _ = forward(task.loss_builder(pair), (), params, omega)
        moved = apply_transform(pair.matched_source, RigidMotion(omega[:1], omega[1:]))
        residual = straight_line_features(task, moved, params) - straight_line_features(task, pair.target, params)
        assert loss == pytest.approx(np.sum(residual**2) / pair.target.shape[0], rel=1e-12)

    def test_gradient_check_passes(self, small_registration):
        task, params, samples = small_registration
        omega = samples[0].omega_star.values + 0.1
        report = check_gradient(task.loss_builder(samples[0].x), params, omega, step=1e-5, tol=1e-5)
        assert report.passed

    def test_chamfer_is_zero_at_ground_truth(self):
        task = RegistrationTask(dim=2, bypass=True, chamfer=True)
        (sample,) = task.generate_dataset({"n_pairs": 1, "n_points": 10})
        assert task.evaluate(sample.x, ParamSet(), sample.omega_star) == pytest.approx(0.0, abs=1e-12)

    def test_dimension_mismatch(self):
        task = RegistrationTask(dim=3, bypass=True)
        (pair,) = generate_registration_dataset({"n_pairs": 1, "dim": 2})
        with pytest.raises(ShapeMismatchError):
            task.evaluate(pair, ParamSet(), task.initial_omega(pair))


class TestSequenceTask:
    @pytest.fixture
    def task_and_params(self):
        task = SequenceTask(hidden=4)
        return task, task.init_params(np.random.default_rng(0))

    def test_entropy_at_model_distribution(self, task_and_params):
        task, params = task_and_params
        sample = task.generate_dataset({"n_samples": 1, "steps": 8})[0].x
        p = predict_distribution(task, sample, params)
        loss = task.evaluate(sample, params, task.prediction(p))
        assert loss == pytest.approx(-np.sum(p * np.log(p)), rel=1e-12)

    def test_confident_model_has_zero_loss_at_its_label(self):
        task = SequenceTask(hidden=2)
        params = ParamSet({
            "rnn.w_x": np.zeros((1, 2)),
            "rnn.w_h": np.zeros((2, 2)),
            "rnn.b_h": np.zeros(2),
            "rnn.w_o": np.zeros((2, 2)),
            "rnn.b_o": np.array([50.0, -50.0]),
        })
        sample = SequenceSample(np.ones(4), [1.0, 0.0])
        assert task.evaluate(sample, params, task.prediction([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_straight_line(self, task_and_params):
        task, params = task_and_params
        sample = task.generate_dataset({"n_samples": 1, "steps": 8, "seed": 3})[0].x
        state = np.zeros((1, 4))
        for value in sample.sequence[:, 0]:
            state = np.tanh(value * params["rnn.w_x"] + state @ params["rnn.w_h"] + params["rnn.b_h"])
        logits = (state @ params["rnn.w_o"] + params["rnn.b_o"]).ravel()
        log_p = logits - np.log(np.sum(np.exp(logits)))
        omega = np.array([0.3, 0.7])
        assert task.evaluate(sample, params, task.prediction(omega)) == pytest.approx(-omega @ log_p, rel=1e-12)

    def test_gradient_check_passes(self, task_and_params):
        task, params = task_and_params
        sample = task.generate_dataset({"n_samples": 1, "steps": 6})[0]
        assert check_gradient(task.loss_builder(sample.x), params, sample.omega_star, wrt="params").passed

    def test_invalid_distribution_rejected(self, task_and_params):
        task, params = task_and_params
        sample = task.generate_dataset({"n_samples": 1})[0].x
        with pytest.raises(LayoutError):
            task.evaluate(sample, params, task.prediction([0.8, 0.8]))

    def test_labels_follow_final_sign(self):
        for sample in SequenceTask().generate_dataset({"n_samples": 20, "seed": 1}):
            assert sample.x.label == int(sample.x.sequence[-1, 0] > 0)


class TestOracles:
    def test_tags(self, oracles):
        assert oracles["quadratic"].mu_true == 2.0
        assert oracles["scaled-quadratic"].mu_true == 6.0
        assert not oracles["concave"].star_convex
        assert not oracles["double-well"].star_convex
        assert oracles["cusp"].mu_true == 0.0

    def test_quadratic_value(self, oracles):
        assert oracles["quadratic"].value([3.0, 1.0]) == pytest.approx(4.0)

    def test_double_well_has_two_minima(self, oracles):
        well = oracles["double-well"]
        assert well.value([1.0, 0.0]) == 0.0
        assert well.value([-1.0, 0.0]) == 0.0

    def test_oracles_need_two_coordinates(self):
        with pytest.raises(ConfigError):
            analytic_oracles(dim=1)


class TestBuildTask:
    def test_known_names(self):
        assert build_task("registration-3d").dim == 3
        assert build_task("oracle:cusp").name == "cusp"
        assert isinstance(build_task("sequence", hidden=3), SequenceTask)

    @pytest.mark.parametrize("name", ["registration-4d", "oracle:saddle", "classifier"])
    def test_unknown_names(self, name):
        with pytest.raises(ConfigError):
            build_task(name)

    def test_bad_options(self):
        with pytest.raises(ConfigError):
            build_task("registration-2d", depth=3)
