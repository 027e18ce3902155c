"""Test-time prediction.

``infer`` iterates the gradient fixed-point map ω_t = g(x, ω_{t−1}; θ) with
g(ω) = ω − η·∇_ω h_θ(ω), either returning the last iterate or the running
mean of the map outputs. ``icp_refine`` is classic point-to-point ICP used
as a post-refinement of registration predictions.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .autodiff import ParamSet, Tensor
from .convexification import PredictionVector
from .errors import ConfigError, DegenerateGeometryError, NonFiniteError, PreconditionError, ShapeMismatchError
from .tasks.base_task import Task
from .tasks.geometry import RigidMotion, apply_transform
from .tasks.registration import PointCloudPair

logger = logging.getLogger(__name__)

INFERENCE_MODES = ("last-iterate", "averaged")
INIT_MODES = ("zero-motion", "provided")


@dataclass
class InferenceConfig:
    """Test-time iteration settings.

    Attributes:
        max_iters: iteration budget T
        step_size: gradient step η
        mode: ``last-iterate`` or ``averaged``
        init: ``zero-motion`` starts from the task's initial prediction, ``provided`` from the caller's
        stop_tol: stop once ||ω̂_t − ω̂_{t−1}|| falls below this value
    """

    max_iters: int = 5
    step_size: float = 0.1
    mode: str = "averaged"
    init: str = "zero-motion"
    stop_tol: float = 0.0

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.mode not in INFERENCE_MODES:
            raise ConfigError(f"mode must be one of {INFERENCE_MODES}, got '{self.mode}'")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got '{self.init}'")
        if self.stop_tol < 0:
            raise ConfigError(f"stop_tol must be non-negative, got {self.stop_tol}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InferenceConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown inference fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Trajectory:
    """Iterates ω̂_0..ω̂_t with their losses and per-step wall times (seconds).

    ``deltas`` holds the raw map outputs Δω̂_t that averaged mode takes the
    mean of; it is empty in last-iterate mode and for ICP.
    """

    iterates: List[PredictionVector] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    deltas: List[PredictionVector] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterates)

    def record(self, omega: PredictionVector, loss: float, wall_time: float) -> None:
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss} at iteration {len(self.iterates)}")
        self.iterates.append(omega)
        self.losses.append(float(loss))
        self.wall_times.append(float(wall_time))

    def to_frame(self, include_wall_time: bool = True) -> pd.DataFrame:
        """Columns ``iter, loss, omega_0..omega_{d−1}[, wall_time_us]``."""
        frame = pd.DataFrame({"iter": np.arange(len(self.iterates)), "loss": self.losses})
        values = np.array([omega.values for omega in self.iterates]).reshape(len(self.iterates), -1)
        for j in range(values.shape[1]):
            frame[f"omega_{j}"] = values[:, j]
        if include_wall_time:
            frame["wall_time_us"] = np.round(np.array(self.wall_times) * 1e6).astype(np.int64)
        return frame


def fixed_point_step(
    task: Task, x: Any, omega_prev: PredictionVector, params: ParamSet, step_size: float
) -> PredictionVector:
    """One gradient step g(ω) = ω − η·∇_ω h(ω), canonicalized to the task layout."""
    omega, _ = _step(task, x, omega_prev, params, step_size)
    return omega


def _step(
    task: Task, x: Any, omega_prev: PredictionVector, params: ParamSet, step_size: float
) -> Tuple[PredictionVector, float]:
    if not step_size > 0:
        raise PreconditionError(f"step_size must be positive, got {step_size}")
    loss, grad = task.evaluate_with_grad(x, params, omega_prev)
    raw = omega_prev.values - step_size * grad
    return omega_prev.replace(omega_prev.layout.canonicalize(raw)), loss


def infer(
    task: Task,
    x: Any,
    params: ParamSet,
    cfg: InferenceConfig,
    omega_init: Optional[PredictionVector] = None,
) -> Tuple[PredictionVector, Trajectory]:
    """Run T fixed-point iterations and return the prediction and its trajectory.

    In averaged mode Δω̂_t = g(ω̂_{t−1}) and ω̂_t = (1/t)·Σ_{τ≤t} Δω̂_τ, i.e. the
    map is applied at the running mean and the mean is taken over the full
    map outputs.

    Raises:
        NonFiniteError: a step produced a non-finite gradient; the partial
            trajectory is attached as ``err.trajectory``.
    """
    if cfg.init == "provided":
        if omega_init is None:
            raise ConfigError("init='provided' requires omega_init")
        omega = omega_init
    else:
        omega = task.initial_omega(x)

    trajectory = Trajectory()
    running_sum: Optional[Tensor] = None
    try:
        for t in range(1, cfg.max_iters + 1):
            started = time.perf_counter()
            output, loss = _step(task, x, omega, params, cfg.step_size)
            if t == 1:
                trajectory.record(omega, loss, 0.0)
            if cfg.mode == "averaged":
                trajectory.deltas.append(output)
                running_sum = output.values if running_sum is None else running_sum + output.values
                new_omega = omega.replace(running_sum / t)
            else:
                new_omega = output
            change = float(np.linalg.norm(new_omega.values - omega.values))
            omega = new_omega
            elapsed = time.perf_counter() - started
            trajectory.record(omega, task.evaluate(x, params, omega), elapsed)
            if change < cfg.stop_tol:
                logger.debug("inference stopped after %d of %d iterations (change %.3e)", t, cfg.max_iters, change)
                break
    except NonFiniteError as err:
        err.trajectory = trajectory
        raise
    return omega, trajectory


def kabsch(P: Any, Q: Any) -> RigidMotion:
    """Least-squares rigid motion taking rows of P onto rows of Q.

    Centroids are removed and the cross-covariance is decomposed by SVD; the
    last singular direction is flipped when needed so the result is always a
    proper rotation.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2:
        raise ShapeMismatchError(f"kabsch needs matched point sets, got {P.shape} and {Q.shape}")
    n, dim = P.shape
    if n < dim:
        raise PreconditionError(f"kabsch needs at least {dim} points, got {n}")

    centroid_p = P.mean(axis=0)
    centroid_q = Q.mean(axis=0)
    H = (P - centroid_p).T @ (Q - centroid_q)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0.0 or S[dim - 2] <= 1e-12 * S[0]:
        raise DegenerateGeometryError(f"cross-covariance is rank deficient (singular values {S})")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T)) or 1.0
    correction = np.ones(dim)
    correction[-1] = d
    R = V @ np.diag(correction) @ U.T
    t = centroid_q - R @ centroid_p
    return RigidMotion.from_matrix(R, t)


@dataclass
class IcpResult:
    motion: RigidMotion
    trajectory: Trajectory
    converged: bool
    degenerate: bool
    n_iters: int

    def __iter__(self) -> Iterator[Any]:
        return iter((self.motion, self.trajectory))


# Source rows per distance block in nearest-neighbour matching
NEAREST_CHUNK = 256


def _nearest(moved: Tensor, target: Tensor, chunk: int = NEAREST_CHUNK) -> Tuple[Tensor, float]:
    """Brute-force nearest target for every moved point; ties go to the lowest index.

    Distances are formed ``chunk`` source rows at a time, so memory grows
    with ``chunk * len(target)`` rather than ``len(moved) * len(target)``.
    """
    matches = np.empty(moved.shape[0], dtype=np.int64)
    nearest_sq = np.empty(moved.shape[0])
    for start in range(0, moved.shape[0], chunk):
        block = moved[start:start + chunk]
        diff = block[:, None, :] - target[None, :, :]
        dist = np.sum(diff * diff, axis=2)
        rows = np.argmin(dist, axis=1)
        matches[start:start + block.shape[0]] = rows
        nearest_sq[start:start + block.shape[0]] = dist[np.arange(block.shape[0]), rows]
    return matches, float(np.mean(nearest_sq))


def icp_refine(
    pair: PointCloudPair, omega_init: PredictionVector, max_iters: int = 20, tol: float = 1e-10
) -> IcpResult:
    """Point-to-point ICP from ``omega_init``.

    Alternates nearest-neighbour matching from the moved source to the target
    with a Kabsch fit on the matched set. The matched objective never
    increases; iteration stops once it decreases by less than ``tol``.
    """
    if max_iters < 1:
        raise PreconditionError(f"max_iters must be at least 1, got {max_iters}")
    source, target = pair.source, pair.target
    motion = RigidMotion.from_prediction(omega_init)
    matches, objective = _nearest(apply_transform(source, motion), target)

    trajectory = Trajectory()
    trajectory.record(motion.to_prediction(), objective, 0.0)
    best = (objective, motion)
    converged = degenerate = False
    n_iters = 0
    for n_iters in range(1, max_iters + 1):
        started = time.perf_counter()
        try:
            candidate = kabsch(source, target[matches])
        except DegenerateGeometryError as err:
            logger.warning("ICP stopped on degenerate correspondences at iteration %d: %s", n_iters, err)
            degenerate = True
            break
        new_matches, new_objective = _nearest(apply_transform(source, candidate), target)
        trajectory.record(candidate.to_prediction(), new_objective, time.perf_counter() - started)
        logger.debug("ICP iteration %d: objective %.6e", n_iters, new_objective)

        decrease = objective - new_objective
        motion, matches, objective = candidate, new_matches, new_objective
        if objective <= best[0]:
            best = (objective, motion)
        if decrease < tol:
            converged = True
            break

    return IcpResult(motion=best[1], trajectory=trajectory, converged=converged, degenerate=degenerate, n_iters=n_iters)
