"""Landscape geometry measurements.

Everything here evaluates a task loss h(ω) for fixed weights: 2-D slices
around the ground truth, audits of the star-convexity conditions along
sampled rays, Lipschitz and sharpness estimates, the near-optimality bound
check and a Monte-Carlo study of iterate averaging.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .autodiff import ParamSet, Tensor
from .convexification import (
    NeighborhoodSampler,
    PredictionVector,
    hinge_con1,
    hinge_con2,
    hinge_con3,
    hinge_local_min,
    interpolate,
    sample_neighborhood,
)
from .errors import ConvexificationError, PreconditionError, UndefinedBoundError
from .tasks.base_task import Task

logger = logging.getLogger(__name__)

CONDITIONS = ("con1", "con2", "con3", "lem1", "gradient")
MU_MAX = 64.0
MU_RESOLUTION = 0.05
# μ̂ is the largest μ whose con2 violation rate stays below this fraction
MU_RATE_THRESHOLD = 0.01


@dataclass
class SliceSpec:
    dim_x: int
    dim_y: int
    half_width: Union[float, Tuple[float, float]]
    resolution: int
    center: PredictionVector

    def __post_init__(self):
        if self.dim_x == self.dim_y:
            raise PreconditionError("dim_x and dim_y must differ")
        for dim in (self.dim_x, self.dim_y):
            if not 0 <= dim < len(self.center):
                raise PreconditionError(f"slice coordinate {dim} outside a {len(self.center)}-D prediction")
        if self.resolution < 3:
            raise PreconditionError(f"resolution must be at least 3, got {self.resolution}")
        if any(not w > 0 for w in self.half_widths):
            raise PreconditionError(f"half_width must be positive, got {self.half_width}")

    @property
    def half_widths(self) -> Tuple[float, float]:
        if isinstance(self.half_width, (int, float)):
            return float(self.half_width), float(self.half_width)
        wx, wy = self.half_width
        return float(wx), float(wy)

    def offsets(self) -> Tuple[Tensor, Tensor]:
        wx, wy = self.half_widths
        return np.linspace(-wx, wx, self.resolution), np.linspace(-wy, wy, self.resolution)


@dataclass
class SliceResult:
    """Loss grid indexed ``[i, j]`` with i along dx and j along dy.

    Non-finite or invalid cells hold NaN and are listed in ``invalid``.
    """

    spec: SliceSpec
    dx: Tensor
    dy: Tensor
    losses: Tensor
    center_loss: float
    local_minima: List[Tuple[int, int]]
    invalid: List[Tuple[int, int]]

    def to_frame(self) -> pd.DataFrame:
        grid_x, grid_y = np.meshgrid(self.dx, self.dy, indexing="ij")
        return pd.DataFrame({"dx": grid_x.ravel(), "dy": grid_y.ravel(), "loss": self.losses.ravel()})

    def minima_offsets(self) -> List[Tuple[float, float]]:
        return [(float(self.dx[i]), float(self.dy[j])) for i, j in self.local_minima]


def _strict_interior_minima(losses: Tensor) -> List[Tuple[int, int]]:
    padded = np.where(np.isfinite(losses), losses, np.inf)
    minima = []
    rows, cols = padded.shape
    for i in range(1, rows - 1):
        for j in range(1, cols - 1):
            value = padded[i, j]
            if not np.isfinite(value):
                continue
            window = padded[i - 1:i + 2, j - 1:j + 2].ravel()
            neighbours = np.delete(window, 4)
            if np.all(value < neighbours):
                minima.append((i, j))
    return minima


def slice_landscape(task: Task, x: Any, params: ParamSet, spec: SliceSpec) -> SliceResult:
    """Evaluate h on a resolution×resolution grid around ``spec.center``.

    Only the two sliced coordinates move; the rest stay at the center.
    Local minima are interior cells strictly below all eight neighbours.
    """
    dx, dy = spec.offsets()
    losses = np.full((spec.resolution, spec.resolution), np.nan)
    invalid = []
    base = spec.center.values
    for i, ox in enumerate(dx):
        for j, oy in enumerate(dy):
            omega = np.array(base)
            omega[spec.dim_x] += ox
            omega[spec.dim_y] += oy
            try:
                losses[i, j] = task.evaluate(x, params, omega)
            except ConvexificationError as err:
                logger.debug("slice cell (%d, %d) skipped: %s", i, j, err)
                invalid.append((i, j))
    minima = _strict_interior_minima(losses)
    return SliceResult(
        spec=spec,
        dx=dx,
        dy=dy,
        losses=losses,
        center_loss=task.evaluate(x, params, spec.center),
        local_minima=minima,
        invalid=invalid,
    )


@dataclass
class RayRecord:
    """Hinge values of one audited ray, one entry per λ for the λ-dependent conditions."""

    index: int
    omega: List[float]
    h_omega: float
    dist_sq: float
    con2: float
    con1: List[float]
    con3: List[float]
    lem1: List[float]
    gradient: List[float]


@dataclass
class AuditReport:
    """Violation rates of the star-convexity conditions around one ground truth.

    ``mu_hat`` is the largest μ (bisection resolution 0.05) whose con2
    violation rate stays below 1%; ``mu_hat_capped`` marks μ̂ ≥ the search cap.
    ``lipschitz_hat`` is the largest gradient norm seen, a lower estimate.
    """

    n_rays: int
    points_per_ray: int
    mu: float
    audit_tol: float
    lambdas: List[float]
    rates: Dict[str, float]
    max_hinges: Dict[str, float]
    mu_hat: float
    mu_hat_capped: bool
    lipschitz_hat: float
    rays: List[RayRecord] = field(default_factory=list)

    def to_dict(self, include_rays: bool = True) -> Dict[str, Any]:
        data = asdict(self)
        if not include_rays:
            data.pop("rays")
        return data

    def to_frame(self) -> pd.DataFrame:
        """One row per ray with the per-condition worst hinge."""
        return pd.DataFrame([
            {
                "ray": ray.index,
                "h_omega": ray.h_omega,
                "dist_sq": ray.dist_sq,
                "con1": max(ray.con1),
                "con2": ray.con2,
                "con3": max(ray.con3),
                "lem1": max(ray.lem1),
                "gradient": max(ray.gradient),
            }
            for ray in self.rays
        ])


def _gradient_hinge(h_star: float, h_point: float, grad: Tensor, omega_star: Tensor, point: Tensor, mu: float) -> float:
    """Slack of h(ω*) ≥ h(ω) + ∇h(ω)ᵀ(ω* − ω) + (μ/2)·||ω* − ω||²."""
    diff = omega_star - point
    return max(0.0, h_point + float(grad @ diff) + mu / 2.0 * float(diff @ diff) - h_star)


def _con2_rate(h_star: float, h_omega: Tensor, dist_sq: Tensor, mu: float, audit_tol: float) -> float:
    return float(np.mean(h_star - h_omega + mu / 2.0 * dist_sq > audit_tol))


def estimate_mu(
    h_star: float,
    h_omega: Sequence[float],
    dist_sq: Sequence[float],
    audit_tol: float,
    mu_max: float = MU_MAX,
    resolution: float = MU_RESOLUTION,
) -> Tuple[float, bool]:
    """Bisection for the largest μ with con2 violation rate below 1%.

    Returns:
        tuple: μ̂ and whether it hit ``mu_max``
    """
    h_omega = np.asarray(h_omega, dtype=np.float64)
    dist_sq = np.asarray(dist_sq, dtype=np.float64)
    if _con2_rate(h_star, h_omega, dist_sq, mu_max, audit_tol) < MU_RATE_THRESHOLD:
        logger.warning("mu_hat reached the bisection cap (>= %g)", mu_max)
        return mu_max, True
    if _con2_rate(h_star, h_omega, dist_sq, 0.0, audit_tol) >= MU_RATE_THRESHOLD:
        return 0.0, False
    lo, hi = 0.0, mu_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if _con2_rate(h_star, h_omega, dist_sq, mid, audit_tol) < MU_RATE_THRESHOLD:
            lo = mid
        else:
            hi = mid
        logger.debug("mu bisection: [%.4f, %.4f]", lo, hi)
    return lo, False


def audit_star_convexity(
    task: Task,
    x: Any,
    params: ParamSet,
    omega_star: PredictionVector,
    sampler: Optional[NeighborhoodSampler],
    n_rays: int,
    points_per_ray: int,
    mu: float,
    audit_tol: float,
    rng: np.random.Generator,
) -> AuditReport:
    """Audit the star-convexity conditions along sampled rays from ``omega_star``.

    Ray endpoints ω come from ``sampler`` (task default when ``None``); the
    interpolation weights are λ_k = k/(p+1) for k = 1..p. con2 is tested at
    each endpoint; con1, con3, the local-minimum condition and the gradient
    condition at every interpolated point ω̃.
    """
    if n_rays < 1:
        raise PreconditionError(f"n_rays must be at least 1, got {n_rays}")
    if points_per_ray < 2:
        raise PreconditionError(f"points_per_ray must be at least 2, got {points_per_ray}")
    if audit_tol < 0:
        raise PreconditionError(f"audit_tol must be non-negative, got {audit_tol}")
    if mu < 0:
        raise PreconditionError(f"mu must be non-negative, got {mu}")

    sampler = sampler or task.default_sampler()
    endpoints = sample_neighborhood(omega_star, sampler, n_rays, rng)
    lambdas = [k / (points_per_ray + 1.0) for k in range(1, points_per_ray + 1)]
    h_star, grad_star = task.evaluate_with_grad(x, params, omega_star)
    lipschitz_hat = float(np.linalg.norm(grad_star))

    rays = []
    for index, omega in enumerate(endpoints):
        h_omega, grad_omega = task.evaluate_with_grad(x, params, omega)
        lipschitz_hat = max(lipschitz_hat, float(np.linalg.norm(grad_omega)))
        dist_sq = omega_star.distance_sq(omega)
        record = RayRecord(
            index=index,
            omega=omega.values.tolist(),
            h_omega=h_omega,
            dist_sq=dist_sq,
            con2=hinge_con2(h_star, h_omega, dist_sq, mu),
            con1=[], con3=[], lem1=[], gradient=[],
        )
        for lam in lambdas:
            tilde = interpolate(omega_star, omega, lam)
            h_tilde, grad_tilde = task.evaluate_with_grad(x, params, tilde)
            lipschitz_hat = max(lipschitz_hat, float(np.linalg.norm(grad_tilde)))
            dist_tilde = omega_star.distance_sq(tilde)
            record.con1.append(hinge_con1(h_star, h_tilde))
            record.con3.append(hinge_con3(h_tilde, h_star, h_omega, lam, dist_sq, mu))
            record.lem1.append(hinge_local_min(h_star, h_tilde, dist_tilde, mu))
            record.gradient.append(
                _gradient_hinge(h_star, h_tilde, grad_tilde, omega_star.values, tilde.values, mu)
            )
        rays.append(record)

    hinges = {
        "con1": np.array([ray.con1 for ray in rays]),
        "con2": np.array([ray.con2 for ray in rays]),
        "con3": np.array([ray.con3 for ray in rays]),
        "lem1": np.array([ray.lem1 for ray in rays]),
        "gradient": np.array([ray.gradient for ray in rays]),
    }
    rates = {name: float(np.mean(values > audit_tol)) for name, values in hinges.items()}
    max_hinges = {name: float(np.max(values)) for name, values in hinges.items()}
    mu_hat, capped = estimate_mu(
        h_star, [ray.h_omega for ray in rays], [ray.dist_sq for ray in rays], audit_tol
    )
    logger.debug("audit: rates %s, mu_hat %.3f", rates, mu_hat)
    return AuditReport(
        n_rays=n_rays,
        points_per_ray=points_per_ray,
        mu=mu,
        audit_tol=audit_tol,
        lambdas=lambdas,
        rates=rates,
        max_hinges=max_hinges,
        mu_hat=mu_hat,
        mu_hat_capped=capped,
        lipschitz_hat=lipschitz_hat,
        rays=rays,
    )


def estimate_lipschitz(
    task: Task,
    x: Any,
    params: ParamSet,
    omega_star: PredictionVector,
    sampler: Optional[NeighborhoodSampler],
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Largest ||∇_ω h|| over ω* and ``n_samples`` sampled ω.

    This is an empirical lower estimate of the local Lipschitz constant.
    """
    if n_samples < 1:
        raise PreconditionError(f"n_samples must be at least 1, got {n_samples}")
    sampler = sampler or task.default_sampler()
    points = [omega_star] + sample_neighborhood(omega_star, sampler, n_samples, rng)
    return max(float(np.linalg.norm(task.evaluate_with_grad(x, params, omega)[1])) for omega in points)


@dataclass
class BoundCheck:
    """Near-optimality radius check.

    The bound uses a sampled Lipschitz estimate, so the verdict is labeled
    ``indicative``.
    """

    distance: float
    bound_value: float
    inflated_bound: float
    gamma_observed: float
    satisfied: bool
    label: str = "indicative"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def check_lemma2(omega_pred: Any, omega_star: Any, L_hat: float, mu: float, gamma_observed: float) -> BoundCheck:
    """Compare ||ω_pred − ω*|| with 2L/μ and its slack-inflated form.

    The inflated bound (L/μ)·[1 + (1 + 2μγ/L²)^{1/2}] is computed as
    (L + (L² + 2μγ)^{1/2}) / μ, which is also defined at L = 0.
    """
    if mu == 0:
        raise UndefinedBoundError("the bound is undefined for mu = 0")
    if mu < 0 or L_hat < 0 or gamma_observed < 0:
        raise PreconditionError("mu must be positive and L_hat, gamma_observed non-negative")
    pred = np.asarray(getattr(omega_pred, "values", omega_pred), dtype=np.float64)
    star = np.asarray(getattr(omega_star, "values", omega_star), dtype=np.float64)
    distance = float(np.linalg.norm(pred - star))
    bound_value = 2.0 * L_hat / mu
    if gamma_observed == 0:
        inflated = bound_value
    else:
        inflated = (L_hat + math.sqrt(L_hat * L_hat + 2.0 * mu * gamma_observed)) / mu
    applicable = inflated if gamma_observed > 0 else bound_value
    return BoundCheck(
        distance=distance,
        bound_value=bound_value,
        inflated_bound=inflated,
        gamma_observed=gamma_observed,
        satisfied=distance <= applicable,
    )


@dataclass
class AveragingCurve:
    """Empirical E||mean_T||² for T = 1..T_max, with its fitted log-log slope."""

    T: Tensor
    mse: Tensor
    slope: Optional[float]
    bound: Optional[Tensor] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"T": self.T, "mse": self.mse})
        if self.bound is not None:
            frame["bound"] = self.bound
        return frame


def simulate_averaging(
    T_max: int,
    error_std: float,
    omega_dim: int,
    n_trials: int,
    rng: np.random.Generator,
    lipschitz: Optional[float] = None,
    mu: Optional[float] = None,
) -> AveragingCurve:
    """Monte-Carlo MSE of running means of i.i.d. zero-mean prediction errors.

    With ``lipschitz`` and ``mu`` the curve also carries the bound 4L²/(μ²T).
    """
    if T_max < 1 or omega_dim < 1 or n_trials < 1:
        raise PreconditionError("T_max, omega_dim and n_trials must be positive")
    if error_std < 0:
        raise PreconditionError(f"error_std must be non-negative, got {error_std}")
    steps = np.arange(1, T_max + 1)
    errors = rng.standard_normal((n_trials, T_max, omega_dim)) * error_std
    running_mean = np.cumsum(errors, axis=1) / steps[None, :, None]
    mse = np.mean(np.sum(running_mean * running_mean, axis=2), axis=0)

    slope = None
    if T_max > 1 and np.all(mse > 0):
        slope = float(np.polyfit(np.log(steps), np.log(mse), 1)[0])
    bound = None
    if lipschitz is not None and mu is not None:
        if not mu > 0:
            raise UndefinedBoundError("the averaging bound needs mu > 0")
        bound = 4.0 * lipschitz ** 2 / (mu ** 2 * steps)
    return AveragingCurve(T=steps, mse=mse, slope=slope, bound=bound)
