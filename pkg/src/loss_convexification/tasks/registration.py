"""Synthetic rigid point-cloud registration.

The learned loss compares PointNet-lite features of the moved source with
features of the target:

    h(ω) = mean_i || φ_θ(R(ω)·s_perm(i) + t(ω)) − φ_θ(target_i) ||²

φ_θ is a shared two-layer tanh MLP applied per point whose output is
concatenated with the max-pooled global feature. With ``bypass=True`` φ is
the identity and the loss is the plain correspondence MSE.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..autodiff import ComputationTape, Node, ParamSet
from ..convexification import NeighborhoodSampler, PredictionVector
from ..errors import ConfigError, DegenerateGeometryError, ShapeMismatchError
from .base_task import Landscape, Sample, Task
from .geometry import RigidMotion, apply_transform, euler_size, registration_layout, tape_rotation

logger = logging.getLogger(__name__)

SHAPES = ("box", "sphere", "gaussians")


@dataclass(frozen=True, eq=False)
class PointCloudPair:
    """Source/target clouds with target[i] = R·source[correspondence[i]] + t (+ jitter)."""

    source: np.ndarray
    target: np.ndarray
    omega_star: PredictionVector
    correspondence: np.ndarray
    pair_id: str = "pair"

    def __post_init__(self):
        source = np.asarray(self.source, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        correspondence = np.asarray(self.correspondence, dtype=np.int64)
        if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
            raise ShapeMismatchError(f"source {source.shape} and target {target.shape} are not matching clouds")
        if correspondence.shape != (target.shape[0],):
            raise ShapeMismatchError(
                f"correspondence needs one source index per target point, got {correspondence.shape}"
            )
        if correspondence.size and (correspondence.min() < 0 or correspondence.max() >= source.shape[0]):
            raise ShapeMismatchError("correspondence indexes outside the source cloud")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "correspondence", correspondence)

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    @property
    def motion(self) -> RigidMotion:
        return RigidMotion.from_prediction(self.omega_star)

    @property
    def matched_source(self) -> np.ndarray:
        return self.source[self.correspondence]

    def residual(self, motion: Optional[RigidMotion] = None) -> float:
        """Largest deviation of target from the moved matched source."""
        moved = apply_transform(self.matched_source, motion or self.motion)
        return float(np.max(np.abs(moved - self.target)))


@dataclass
class RegistrationDataConfig:
    """Generator settings; ranges are half-widths of uniform draws."""

    n_pairs: int = 200
    n_points: int = 32
    dim: int = 2
    angle_range: float = math.pi / 4
    trans_range: float = 0.5
    jitter_sigma: float = 0.0
    partial_overlap_fraction: float = 1.0
    seed: int = 0
    shapes: Tuple[str, ...] = SHAPES

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        euler_size(self.dim)
        if self.n_pairs < 1:
            raise ConfigError(f"n_pairs must be positive, got {self.n_pairs}")
        if self.n_points < self.dim + 1:
            raise DegenerateGeometryError(
                f"n_points={self.n_points} cannot span {self.dim} dimensions (need at least {self.dim + 1})"
            )
        if self.angle_range < 0 or self.trans_range < 0 or self.jitter_sigma < 0:
            raise ConfigError("angle_range, trans_range and jitter_sigma must be non-negative")
        if not 0.0 < self.partial_overlap_fraction <= 1.0:
            raise ConfigError(
                f"partial_overlap_fraction must lie in (0, 1], got {self.partial_overlap_fraction}"
            )
        unknown = set(self.shapes) - set(SHAPES)
        if not self.shapes or unknown:
            raise ConfigError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["shapes"] = list(self.shapes)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RegistrationDataConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown registration data fields: {sorted(unknown)}")
        return cls(**data)


def _box_surface(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    half_extent = rng.uniform(0.5, 1.0, size=dim)
    points = rng.uniform(-1.0, 1.0, size=(n, dim))
    # push one coordinate of every point onto a face
    faces = rng.integers(0, dim, size=n)
    signs = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
    points[np.arange(n), faces] = signs
    return points * half_extent


def _sphere_shell(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    directions = rng.standard_normal((n, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radius = rng.uniform(0.5, 1.0)
    return directions * radius


def _blended_gaussians(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    centers = rng.uniform(-0.7, 0.7, size=(3, dim))
    owners = rng.integers(0, 3, size=n)
    return centers[owners] + 0.25 * rng.standard_normal((n, dim))


_SHAPE_GENERATORS = {"box": _box_surface, "sphere": _sphere_shell, "gaussians": _blended_gaussians}


def _check_spread(points: np.ndarray, dim: int) -> None:
    singular = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if singular.size < dim or singular[dim - 1] <= 1e-6 * max(singular[0], 1e-300):
        raise DegenerateGeometryError(f"point set is collinear/coplanar (singular values {singular})")


def generate_registration_dataset(cfg: Any) -> List[PointCloudPair]:
    """Seeded synthetic pairs; identical output for identical configs."""
    if isinstance(cfg, Mapping):
        cfg = RegistrationDataConfig.from_dict(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_angles = euler_size(cfg.dim)
    keep = max(cfg.dim + 1, int(math.ceil(cfg.partial_overlap_fraction * cfg.n_points)))
    pairs = []
    for index in range(cfg.n_pairs):
        shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
        source = _SHAPE_GENERATORS[shape](rng, cfg.n_points, cfg.dim)
        _check_spread(source, cfg.dim)
        euler = rng.uniform(-cfg.angle_range, cfg.angle_range, size=n_angles) if cfg.angle_range else np.zeros(n_angles)
        translation = rng.uniform(-cfg.trans_range, cfg.trans_range, size=cfg.dim) if cfg.trans_range else np.zeros(cfg.dim)
        motion = RigidMotion(euler, translation)

        if keep < cfg.n_points:
            # crop to the half-space seen along a random viewing direction
            direction = rng.standard_normal(cfg.dim)
            visible = np.argsort(-(source @ direction), kind="stable")[:keep]
            correspondence = rng.permutation(np.sort(visible))
        else:
            correspondence = rng.permutation(cfg.n_points)
        target = apply_transform(source[correspondence], motion)
        if cfg.jitter_sigma:
            target = target + cfg.jitter_sigma * rng.standard_normal(target.shape)
        pairs.append(
            PointCloudPair(
                source=source,
                target=target,
                omega_star=motion.to_prediction(),
                correspondence=correspondence,
                pair_id=f"{index:05d}",
            )
        )
    logger.debug("generated %d registration pairs (dim=%d, seed=%d)", len(pairs), cfg.dim, cfg.seed)
    return pairs


class RegistrationTask(Task):
    """Learned registration loss over ω = (Euler angles, translation)."""

    name = "registration"
    description = "Rigid point-cloud registration with a PointNet-lite feature loss"

    def __init__(
        self,
        dim: int = 2,
        width: int = 32,
        feature_dim: int = 16,
        bypass: bool = False,
        chamfer: bool = False,
        angle_sigma: float = 0.2,
        translation_sigma: float = 0.1,
    ):
        self.dim = dim
        self.width = width
        self.feature_dim = feature_dim
        self.bypass = bypass
        self.chamfer = chamfer
        self.angle_sigma = angle_sigma
        self.translation_sigma = translation_sigma
        self.layout = registration_layout(dim)
        self.name = f"registration-{dim}d"

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        if self.bypass:
            return ParamSet()
        shapes = {
            "phi.w1": (self.dim, self.width),
            "phi.b1": (self.width,),
            "phi.w2": (self.width, self.feature_dim),
            "phi.b2": (self.feature_dim,),
        }
        params = {}
        for name, shape in shapes.items():
            if len(shape) == 2:
                params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
            else:
                params[name] = np.zeros(shape)
        return ParamSet(params)

    def default_sampler(self) -> NeighborhoodSampler:
        return NeighborhoodSampler(sigma={"euler": self.angle_sigma, "translation": self.translation_sigma})

    def generate_dataset(self, cfg: Any) -> List[Sample]:
        if isinstance(cfg, Mapping):
            cfg = RegistrationDataConfig.from_dict({"dim": self.dim, **cfg})
        if cfg.dim != self.dim:
            raise ConfigError(f"task is {self.dim}-D but data config asks for dim={cfg.dim}")
        return [Sample(pair, pair.omega_star) for pair in generate_registration_dataset(cfg)]

    def initial_omega(self, x: Any) -> PredictionVector:
        return RigidMotion.identity(self.dim).to_prediction()

    def features(self, tape: ComputationTape, points: Node, params: Mapping[str, Node]) -> Node:
        """Per-point features concatenated with the max-pooled global feature."""
        if self.bypass:
            return points
        hidden = tape.tanh(tape.add(tape.matmul(points, params["phi.w1"]), params["phi.b1"]))
        local = tape.tanh(tape.add(tape.matmul(hidden, params["phi.w2"]), params["phi.b2"]))
        pooled = tape.max_reduce(local, axis=0)
        tiled = tape.add(tape.constant(np.zeros(local.shape)), pooled)
        return tape.concat([local, tiled], axis=1)

    def move(self, tape: ComputationTape, points: Node, omega: Node) -> Node:
        n_angles = euler_size(self.dim)
        rotation = tape_rotation(tape, tape.index(omega, slice(0, n_angles)))
        translation = tape.index(omega, slice(n_angles, n_angles + self.dim))
        return tape.add(tape.matmul(points, tape.transpose(rotation)), translation)

    def landscape(self, tape: ComputationTape, x: PointCloudPair, params: Mapping[str, Node]) -> Landscape:
        if x.dim != self.dim:
            raise ShapeMismatchError(f"task is {self.dim}-D, pair is {x.dim}-D")
        target_features = self.features(tape, tape.constant(x.target), params)
        if self.chamfer:
            source = tape.constant(x.source)
            target_sq = tape.reshape(
                tape.sum_reduce(tape.mul(target_features, target_features), axis=1), (1, x.target.shape[0])
            )

            def chamfer_loss(omega: Node) -> Node:
                moved = self.features(tape, self.move(tape, source, omega), params)
                moved_sq = tape.reshape(tape.sum_reduce(tape.mul(moved, moved), axis=1), (x.source.shape[0], 1))
                cross = tape.matmul(moved, tape.transpose(target_features))
                dist = tape.sub(tape.add(moved_sq, target_sq), tape.scale(cross, 2.0))
                # every target point to its nearest moved source point
                nearest = tape.neg(tape.max_reduce(tape.neg(dist), axis=0))
                return tape.scale(tape.sum_reduce(nearest), 1.0 / x.target.shape[0])

            return chamfer_loss

        matched = tape.constant(x.matched_source)

        def correspondence_loss(omega: Node) -> Node:
            moved = self.features(tape, self.move(tape, matched, omega), params)
            residual = tape.sub(moved, target_features)
            return tape.scale(tape.squared_norm(residual), 1.0 / x.target.shape[0])

        return correspondence_loss


def registration_loss(pair: PointCloudPair, params: ParamSet, omega: PredictionVector, task: Optional[RegistrationTask] = None):
    """Autodiff builder of the registration loss for ``pair``.

    ``params`` and ``omega`` are the values the builder is meant to be run
    with; an empty ParamSet selects the identity-feature bypass.
    """
    if task is None:
        task = RegistrationTask(dim=pair.dim, bypass=len(params) == 0)
    if omega.layout != task.layout:
        raise ShapeMismatchError(f"omega layout does not match a {task.dim}-D registration task")
    return task.loss_builder(pair)
