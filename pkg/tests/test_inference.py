import math

import numpy as np
import pytest

from loss_convexification.autodiff import ParamSet
from loss_convexification.errors import ConfigError, DegenerateGeometryError, NonFiniteError, PreconditionError
from loss_convexification.inference import InferenceConfig, _nearest, fixed_point_step, icp_refine, infer, kabsch
from loss_convexification.tasks import PointCloudPair, RigidMotion, apply_transform, generate_registration_dataset
from loss_convexification.tasks.oracles import AnalyticOracle


def grid_cloud():
    """Irregular 5x4 planar grid; nearest neighbours are at least 0.37 apart."""
    xs, ys = np.meshgrid(np.arange(5) * 0.5, np.arange(4) * 0.37, indexing="ij")
    points = np.column_stack([xs.ravel() + 0.05 * ys.ravel(), ys.ravel()])
    return points - points.mean(axis=0)


def rigid_fit_error(P, Q, motion):
    residual = apply_transform(P, motion) - Q
    return float(np.mean(np.sum(residual * residual, axis=1)))


def exact_pair(motion):
    source = grid_cloud()
    return PointCloudPair(
        source=source,
        target=apply_transform(source, motion),
        omega_star=motion.to_prediction(),
        correspondence=np.arange(source.shape[0]),
    )


class TestFixedPoint:
    def test_quadratic_half_step_lands_on_minimizer(self, oracles):
        quadratic = oracles["quadratic"]
        omega = fixed_point_step(quadratic, None, quadratic.initial_omega(None), ParamSet(), 0.5)
        assert omega.values.tolist() == [1.0, 1.0]

    def test_stationary_point_is_fixed(self, oracles):
        quadratic = oracles["quadratic"]
        omega = fixed_point_step(quadratic, None, quadratic.omega_star, ParamSet(), 0.3)
        assert np.array_equal(omega.values, quadratic.omega_star.values)

    def test_non_positive_step_rejected(self, oracles):
        quadratic = oracles["quadratic"]
        with pytest.raises(PreconditionError):
            fixed_point_step(quadratic, None, quadratic.omega_star, ParamSet(), 0.0)


class TestInfer:
    def test_single_iteration_modes_agree(self, oracles):
        quadratic = oracles["quadratic"]
        last, _ = infer(quadratic, None, ParamSet(), InferenceConfig(max_iters=1, step_size=0.2, mode="last-iterate"))
        averaged, _ = infer(quadratic, None, ParamSet(), InferenceConfig(max_iters=1, step_size=0.2, mode="averaged"))
        assert np.array_equal(last.values, averaged.values)

    def test_zero_gradient_keeps_initial_prediction(self, oracles):
        flat = oracles["flat"]
        for t in (1, 3, 5):
            omega, _ = infer(flat, None, ParamSet(), InferenceConfig(max_iters=t))
            assert np.array_equal(omega.values, flat.initial_omega(None).values)

    def test_last_iterate_contracts_toward_minimizer(self, oracles):
        quadratic = oracles["quadratic"]
        _, trajectory = infer(quadratic, None, ParamSet(), InferenceConfig(max_iters=3, step_size=0.25, mode="last-iterate"))
        firsts = [omega.values[0] for omega in trajectory.iterates]
        assert firsts == pytest.approx([0.0, 0.5, 0.75, 0.875], abs=1e-15)

    def test_averaged_matches_scripted_recurrence(self, oracles):
        quadratic = oracles["quadratic"]
        center = quadratic.omega_star.values

        def g(omega):
            return omega - 0.25 * 2.0 * (omega - center)

        expected = [np.zeros(2)]
        outputs = []
        for t in range(1, 6):
            outputs.append(g(expected[-1]))
            expected.append(np.mean(outputs, axis=0))

        _, trajectory = infer(quadratic, None, ParamSet(), InferenceConfig(max_iters=5, step_size=0.25, mode="averaged"))
        assert len(trajectory) == 6
        assert len(trajectory.deltas) == 5
        for got, want in zip(trajectory.iterates, expected):
            assert np.allclose(got.values, want, atol=1e-12)

    def test_losses_follow_iterates(self, oracles):
        quadratic = oracles["quadratic"]
        _, trajectory = infer(quadratic, None, ParamSet(), InferenceConfig(max_iters=4, step_size=0.1))
        for omega, loss in zip(trajectory.iterates, trajectory.losses):
            assert loss == pytest.approx(quadratic.value(omega.values))

    def test_stop_tolerance_ends_early(self, oracles):
        quadratic = oracles["quadratic"]
        cfg = InferenceConfig(max_iters=5, step_size=0.5, mode="last-iterate", stop_tol=1e-12)
        _, trajectory = infer(quadratic, None, ParamSet(), cfg)
        assert len(trajectory) == 3

    def test_provided_init_requires_omega(self, oracles):
        with pytest.raises(ConfigError):
            infer(oracles["quadratic"], None, ParamSet(), InferenceConfig(init="provided"))

    def test_provided_init_is_used(self, oracles):
        quadratic = oracles["quadratic"]
        start = quadratic.prediction([1.0, 1.0])
        omega, _ = infer(quadratic, None, ParamSet(), InferenceConfig(init="provided"), omega_init=start)
        assert np.array_equal(omega.values, start.values)

    def test_non_finite_step_keeps_partial_trajectory(self):
        center = np.ones(2)
        log_distance = AnalyticOracle(
            "log-distance", "log ||ω − c||²",
            lambda tape, omega, c: tape.log(tape.squared_norm(tape.sub(omega, c))),
            center, mu_true=None,
        )
        with pytest.raises(NonFiniteError) as info:
            infer(log_distance, None, ParamSet(), InferenceConfig(max_iters=3, step_size=1.0, mode="last-iterate"))
        assert len(info.value.trajectory) == 1

    def test_trajectory_frame(self, oracles):
        _, trajectory = infer(oracles["quadratic"], None, ParamSet(), InferenceConfig(max_iters=2))
        frame = trajectory.to_frame(include_wall_time=False)
        assert list(frame.columns) == ["iter", "loss", "omega_0", "omega_1"]
        assert "wall_time_us" in trajectory.to_frame().columns

    @pytest.mark.parametrize("field,value", [("max_iters", 0), ("step_size", -0.1), ("mode", "best"), ("init", "random")])
    def test_invalid_config(self, field, value):
        with pytest.raises(ConfigError):
            InferenceConfig.from_dict({field: value})


class TestKabsch:
    def test_identical_sets(self):
        points = np.random.default_rng(0).standard_normal((8, 3))
        motion = kabsch(points, points)
        assert np.allclose(motion.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(motion.translation, 0.0, atol=1e-12)

    @pytest.mark.parametrize("dim,euler", [(2, [0.7]), (3, [0.3, -0.2, 0.1])])
    def test_recovers_motion(self, dim, euler):
        points = np.random.default_rng(1).standard_normal((10, dim))
        truth = RigidMotion(euler, np.linspace(-1.0, 0.5, dim))
        motion = kabsch(points, apply_transform(points, truth))
        assert np.allclose(motion.euler, truth.euler, atol=1e-9)
        assert np.allclose(motion.translation, truth.translation, atol=1e-9)

    def test_mirrored_plane_still_gives_rotation(self):
        rng = np.random.default_rng(2)
        planar = np.column_stack([rng.standard_normal((12, 2)), np.zeros(12)])
        mirrored = planar * np.array([-1.0, 1.0, 1.0])
        motion = kabsch(planar, mirrored)
        assert np.linalg.det(motion.rotation) == pytest.approx(1.0)

    def test_collinear_points_are_degenerate(self):
        line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            kabsch(line, line)

    def test_too_few_points(self):
        with pytest.raises(PreconditionError):
            kabsch(np.zeros((2, 3)), np.zeros((2, 3)))

    @pytest.mark.slow
    def test_no_random_motion_does_better(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            P = rng.standard_normal((10, 3))
            truth = RigidMotion(rng.uniform(-1.0, 1.0, size=3), rng.uniform(-1.0, 1.0, size=3))
            Q = apply_transform(P, truth) + 0.05 * rng.standard_normal(P.shape)
            best = rigid_fit_error(P, Q, kabsch(P, Q))
            for _ in range(1000):
                candidate = RigidMotion(rng.uniform(-math.pi, math.pi, size=3), rng.uniform(-1.5, 1.5, size=3))
                assert best <= rigid_fit_error(P, Q, candidate) + 1e-12


class TestIcp:
    def test_ground_truth_is_a_fixed_point(self):
        pair = exact_pair(RigidMotion([0.4], [0.3, -0.2]))
        result = icp_refine(pair, pair.omega_star)
        assert result.converged
        assert result.n_iters == 1
        assert result.trajectory.losses[-1] == pytest.approx(0.0, abs=1e-20)

    def test_recovers_small_perturbation(self):
        truth = RigidMotion([0.4], [0.3, -0.2])
        pair = exact_pair(truth)
        start = RigidMotion([0.4 + math.radians(2.0)], [0.32, -0.18]).to_prediction()
        motion, trajectory = icp_refine(pair, start)
        assert np.allclose(motion.euler, truth.euler, atol=1e-9)
        assert np.allclose(motion.translation, truth.translation, atol=1e-9)
        assert np.all(np.diff(trajectory.losses) <= 1e-12)

    def test_objective_never_increases(self):
        pair = exact_pair(RigidMotion([1.0], [0.5, 0.5]))
        result = icp_refine(pair, RigidMotion.identity(2).to_prediction(), max_iters=30)
        assert np.all(np.diff(result.trajectory.losses) <= 1e-12)
        assert result.trajectory.losses[-1] <= result.trajectory.losses[0]

    def test_degenerate_matches_return_best_so_far(self, caplog):
        line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
        pair = PointCloudPair(line, line, RigidMotion.identity(3).to_prediction(), np.arange(6))
        result = icp_refine(pair, pair.omega_star)
        assert result.degenerate
        assert np.array_equal(result.motion.to_prediction().values, pair.omega_star.values)
        assert "degenerate" in caplog.text

    def test_objective_never_increases_on_generated_pairs(self):
        data = {"n_pairs": 200, "n_points": 16, "dim": 3, "jitter_sigma": 0.01, "partial_overlap_fraction": 0.75, "seed": 4}
        for pair in generate_registration_dataset(data):
            result = icp_refine(pair, RigidMotion.identity(3).to_prediction())
            assert np.all(np.diff(result.trajectory.losses) <= 1e-12), pair.pair_id


class TestNearest:
    def test_chunks_match_row_by_row_search(self):
        rng = np.random.default_rng(9)
        base = rng.standard_normal((2048, 3))
        # every point appears twice, so each match is a tie between i and i + 2048
        target = np.vstack([base, base])
        moved = rng.standard_normal((4096, 3))
        matches, objective = _nearest(moved, target)

        expected = np.empty(4096, dtype=np.int64)
        nearest_sq = np.empty(4096)
        for i, point in enumerate(moved):
            dist = np.sum((point - target) ** 2, axis=1)
            expected[i] = np.argmin(dist)
            nearest_sq[i] = dist[expected[i]]
        assert np.array_equal(matches, expected)
        assert np.all(matches < 2048)
        assert objective == pytest.approx(float(np.mean(nearest_sq)), rel=1e-12)

    @pytest.mark.parametrize("chunk", [1, 7, 64, 500])
    def test_chunk_size_does_not_change_matches(self, chunk):
        rng = np.random.default_rng(10)
        moved, target = rng.standard_normal((300, 2)), rng.standard_normal((120, 2))
        whole = _nearest(moved, target, chunk=300)
        chunked = _nearest(moved, target, chunk=chunk)
        assert np.array_equal(whole[0], chunked[0])
        assert whole[1] == pytest.approx(chunked[1], rel=1e-12)
