"""Star-convexity constraints and the composite convexification objective.

The three soft-margin constraints are enforced through their closed-form
minimal slacks, i.e. hinges ``max(0, lhs - rhs)``; no explicit slack
variables exist. ``dlc_loss`` evaluates the base loss at the ground truth and
every hinge on one tape so that gradients reach θ through all terms.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import OMEGA, ComputationTape, Node, ParamSet, Tensor, forward
from .errors import ConfigError, LayoutError, NonFiniteError, PreconditionError

if TYPE_CHECKING:
    from .tasks.base_task import Task

logger = logging.getLogger(__name__)

SEGMENT_KINDS = ("angle", "translation", "probability", "free")
SAMPLER_MODES = ("gaussian-additive", "noisy-one-hot-softmax")
LAMBDA_MODES = ("fixed", "sampled")
CONSTRAINTS = ("con1", "con2", "con3")
PROBABILITY_TOL = 1e-9

LAMBDA_PARAM = "dlc.lambda_logit"
MU_PARAM = "dlc.log_mu"


def wrap_angle(values: Any) -> Tensor:
    """Map angles (radians) into (-π, π]."""
    values = np.asarray(values, dtype=np.float64)
    return math.pi - np.mod(math.pi - values, 2.0 * math.pi)


def project_to_simplex(values: Any) -> Tensor:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(values, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    kind: str = "free"

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise LayoutError(f"unknown segment kind '{self.kind}'")
        if not 0 <= self.start < self.stop:
            raise LayoutError(f"segment '{self.name}' has empty range [{self.start}, {self.stop})")

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class Layout:
    """Task-declared segment map of a prediction vector."""

    segments: Tuple[Segment, ...]

    def __post_init__(self):
        position = 0
        for segment in self.segments:
            if segment.start != position:
                raise LayoutError(f"segment '{segment.name}' does not start at {position}")
            position = segment.stop
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate segment names: {names}")

    @property
    def dim(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def segment(self, name: str) -> Segment:
        for segment in self.segments:
            if segment.name == name:
                return segment
        raise LayoutError(f"layout has no segment '{name}'")

    def of_kind(self, kind: str) -> List[Segment]:
        return [s for s in self.segments if s.kind == kind]

    def validate(self, values: Tensor) -> None:
        if values.shape != (self.dim,):
            raise LayoutError(f"expected a vector of length {self.dim}, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("prediction vector contains non-finite entries")
        for segment in self.of_kind("probability"):
            probs = values[segment.slice]
            if np.any(probs < 0.0) or abs(float(np.sum(probs)) - 1.0) > PROBABILITY_TOL:
                raise LayoutError(f"segment '{segment.name}' is not a probability vector: {probs}")

    def canonicalize(self, values: Any) -> Tensor:
        """Wrap angle segments and project probability segments onto the simplex."""
        values = np.array(values, dtype=np.float64)
        for segment in self.of_kind("angle"):
            values[segment.slice] = wrap_angle(values[segment.slice])
        for segment in self.of_kind("probability"):
            values[segment.slice] = project_to_simplex(values[segment.slice])
        return values


def free_layout(dim: int) -> Layout:
    return Layout((Segment("omega", 0, dim, "free"),))


@dataclass(frozen=True, eq=False)
class PredictionVector:
    """Flat float64 prediction ω together with its segment layout."""

    values: Tensor
    layout: Layout

    def __post_init__(self):
        values = np.ascontiguousarray(np.array(self.values, dtype=np.float64))
        self.layout.validate(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"PredictionVector({self.values.tolist()})"

    def replace(self, values: Any) -> "PredictionVector":
        return PredictionVector(values, self.layout)

    def segment(self, name: str) -> Tensor:
        return self.values[self.layout.segment(name).slice]

    def distance_sq(self, other: "PredictionVector") -> float:
        _check_layout(self, other)
        diff = self.values - other.values
        return float(np.sum(diff * diff))


def _check_layout(a: PredictionVector, b: PredictionVector) -> None:
    if a.layout != b.layout:
        raise LayoutError(f"layout mismatch: {a.layout} vs {b.layout}")


@dataclass(frozen=True)
class NeighborhoodSampler:
    """Noise model for drawing ω around a ground truth.

    ``sigma`` maps segment names to standard deviations in task units;
    ``default_sigma`` covers segments not named explicitly.
    """

    sigma: Mapping[str, float] = field(default_factory=dict)
    mode: str = "gaussian-additive"
    default_sigma: Optional[float] = None

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ConfigError(f"sampler mode must be one of {SAMPLER_MODES}, got '{self.mode}'")
        for name, value in self.sigma.items():
            if not value > 0:
                raise ConfigError(f"sigma for segment '{name}' must be positive, got {value}")
        if self.default_sigma is not None and not self.default_sigma > 0:
            raise ConfigError(f"default_sigma must be positive, got {self.default_sigma}")

    def sigma_for(self, segment: Segment) -> float:
        if segment.name in self.sigma:
            return float(self.sigma[segment.name])
        if self.default_sigma is not None:
            return float(self.default_sigma)
        raise ConfigError(f"sampler has no sigma for segment '{segment.name}'")

    def to_dict(self) -> Dict[str, Any]:
        return {"sigma": dict(self.sigma), "mode": self.mode, "default_sigma": self.default_sigma}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NeighborhoodSampler":
        unknown = set(data) - {"sigma", "mode", "default_sigma"}
        if unknown:
            raise ConfigError(f"unknown sampler fields: {sorted(unknown)}")
        return cls(
            sigma=dict(data.get("sigma", {})),
            mode=data.get("mode", "gaussian-additive"),
            default_sigma=data.get("default_sigma"),
        )


@dataclass
class DlcConfig:
    """Hyperparameters of the constrained objective.

    Attributes:
        lam: interpolation weight λ in [0, 1] (JSON key ``lambda``)
        mu: surface sharpness μ ≥ 0, shared by the second and third constraints
        rho: trade-off ρ ≥ 0 between the base loss and the hinge expectation
        n_samples: ω draws per datapoint
        sampler: neighborhood sampler; ``None`` uses the task default
        lambda_mode: ``fixed`` uses ``lam``; ``sampled`` draws λ ~ U(0, 1) per ω
        trainable: learn λ = sigmoid(a) and μ = exp(b) alongside θ
        constraints: hinges that enter the loss; the others are still reported
    """

    lam: float = 0.5
    mu: float = 1.0
    rho: float = 1.0
    n_samples: int = 3
    sampler: Optional[NeighborhoodSampler] = None
    lambda_mode: str = "fixed"
    trainable: bool = False
    constraints: Tuple[str, ...] = CONSTRAINTS

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if self.rho < 0:
            raise ConfigError(f"rho must be non-negative, got {self.rho}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigError(f"n_samples must be a positive integer, got {self.n_samples}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}, got '{self.lambda_mode}'")
        if self.trainable and (self.lam in (0.0, 1.0) or self.mu == 0.0):
            raise ConfigError("trainable lambda/mu need 0 < lambda < 1 and mu > 0")
        if self.trainable and self.lambda_mode == "sampled":
            raise ConfigError("a trainable lambda cannot also be sampled; use lambda_mode 'fixed'")
        if isinstance(self.constraints, str):
            self.constraints = (self.constraints,)
        unknown = set(self.constraints) - set(CONSTRAINTS)
        if not self.constraints or unknown:
            raise ConfigError(f"constraints must be a non-empty subset of {CONSTRAINTS}, got {self.constraints}")
        self.constraints = tuple(name for name in CONSTRAINTS if name in self.constraints)
        if isinstance(self.sampler, Mapping):
            self.sampler = NeighborhoodSampler.from_dict(self.sampler)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda": self.lam,
            "mu": self.mu,
            "rho": self.rho,
            "n_samples": self.n_samples,
            "sampler": self.sampler.to_dict() if self.sampler else None,
            "lambda_mode": self.lambda_mode,
            "trainable": self.trainable,
            "constraints": list(self.constraints),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DlcConfig":
        known = {"lambda", "mu", "rho", "n_samples", "sampler", "lambda_mode", "trainable", "constraints"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dlc fields: {sorted(unknown)}")
        kwargs = {key: value for key, value in data.items() if key != "lambda"}
        if "lambda" in data:
            kwargs["lam"] = data["lambda"]
        return cls(**kwargs)

    def trainable_params(self) -> Dict[str, Tensor]:
        """Initial values of the learned λ/μ reparametrization."""
        return {
            LAMBDA_PARAM: np.array(math.log(self.lam / (1.0 - self.lam))),
            MU_PARAM: np.array(math.log(self.mu)),
        }


@dataclass(frozen=True, eq=False)
class HingeTriple:
    """Minimal slacks (ε, γ, ξ) for one sampled ω."""

    epsilon: float
    gamma: float
    xi: float
    omega_sample: PredictionVector
    omega_tilde: PredictionVector
    lam: float

    @property
    def total(self) -> float:
        return self.epsilon + self.gamma + self.xi


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteError(f"{name} must be finite, got {value}")


def _require_unit_interval(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise PreconditionError(f"lambda must lie in [0, 1], got {lam}")


def _require_geometry(dist_sq: float, mu: float) -> None:
    if dist_sq < 0:
        raise PreconditionError(f"dist_sq must be non-negative, got {dist_sq}")
    if mu < 0:
        raise PreconditionError(f"mu must be non-negative, got {mu}")


def interpolate(omega_star: PredictionVector, omega: PredictionVector, lam: float) -> PredictionVector:
    """ω̃ = (1 − λ)·ω* + λ·ω, coordinatewise in the raw coordinate space."""
    _check_layout(omega_star, omega)
    _require_unit_interval(lam)
    return omega_star.replace((1.0 - lam) * omega_star.values + lam * omega.values)


def hinge_con1(h_star: float, h_tilde: float) -> float:
    """Slack of h(ω*) ≤ h(ω̃) + ε."""
    _require_finite(h_star=h_star, h_tilde=h_tilde)
    return max(0.0, h_star - h_tilde)


def hinge_con2(h_star: float, h_omega: float, dist_sq: float, mu: float) -> float:
    """Slack of h(ω*) ≤ h(ω) − (μ/2)·||ω* − ω||² + γ."""
    _require_finite(h_star=h_star, h_omega=h_omega, dist_sq=dist_sq, mu=mu)
    _require_geometry(dist_sq, mu)
    return max(0.0, h_star - h_omega + mu / 2.0 * dist_sq)


def hinge_con3(h_tilde: float, h_star: float, h_omega: float, lam: float, dist_sq: float, mu: float) -> float:
    """Slack of h(ω̃) ≤ (1 − λ)·h(ω*) + λ·h(ω) − (λ(1 − λ)μ/2)·||ω* − ω||² + ξ."""
    _require_finite(h_tilde=h_tilde, h_star=h_star, h_omega=h_omega, lam=lam, dist_sq=dist_sq, mu=mu)
    _require_unit_interval(lam)
    _require_geometry(dist_sq, mu)
    return max(0.0, h_tilde - (1.0 - lam) * h_star - lam * h_omega + lam * (1.0 - lam) * mu / 2.0 * dist_sq)


def hinge_local_min(h_star: float, h_tilde: float, dist_tilde_sq: float, mu: float) -> float:
    """Slack of the gradient-free local-minimum condition h(ω*) ≤ h(ω̃) − (μ/2)·||ω* − ω̃||²."""
    return hinge_con2(h_star, h_tilde, dist_tilde_sq, mu)


def sample_neighborhood(
    omega_star: PredictionVector, sampler: NeighborhoodSampler, n: int, rng: np.random.Generator
) -> List[PredictionVector]:
    """Draw ``n`` predictions around ``omega_star``.

    Gaussian-additive mode adds N(0, σ²) per coordinate (angles are wrapped,
    probability segments projected back onto the simplex). The
    noisy-one-hot-softmax mode instead perturbs probability segments by
    σ·N(0, 1) and applies a softmax; other segments stay additive.
    """
    if n < 1:
        raise PreconditionError(f"n must be at least 1, got {n}")
    layout = omega_star.layout
    sigma = np.empty(layout.dim)
    for segment in layout.segments:
        sigma[segment.slice] = sampler.sigma_for(segment)
    noise = rng.standard_normal((n, layout.dim)) * sigma
    raw = omega_star.values + noise

    if sampler.mode == "noisy-one-hot-softmax":
        for segment in layout.of_kind("probability"):
            block = raw[:, segment.slice]
            shifted = np.exp(block - block.max(axis=1, keepdims=True))
            raw[:, segment.slice] = shifted / shifted.sum(axis=1, keepdims=True)
        samples = []
        for row in raw:
            for segment in layout.of_kind("angle"):
                row[segment.slice] = wrap_angle(row[segment.slice])
            samples.append(omega_star.replace(row))
        return samples
    return [omega_star.replace(layout.canonicalize(row)) for row in raw]


@dataclass
class DlcEvaluation:
    """Result of one objective evaluation.

    ``loss`` equals ``base_loss + rho * hinge_mean``; ``grads`` are keyed by
    parameter name. ``hinge_terms`` holds the mean slack of each constraint,
    including constraints left out of the loss.
    """

    loss: float
    grads: Dict[str, Tensor]
    diagnostics: List[HingeTriple]
    base_loss: float
    hinge_mean: float
    hinge_terms: Dict[str, float] = field(default_factory=dict)


Coefficient = Union[float, Node]


def _times(tape: ComputationTape, coefficient: Coefficient, node: Node) -> Node:
    if isinstance(coefficient, Node):
        return tape.mul(coefficient, node)
    return tape.scale(node, coefficient)


class DlcGraph:
    """Tape builder of the composite objective for one datapoint.

    The ω samples and λ values are fixed at construction, so repeated builds
    differ only in θ. The ``omega`` leaf carries ω*. Each build keeps its
    hinge nodes for :meth:`diagnostics`.
    """

    def __init__(
        self,
        task: "Task",
        x: Any,
        omega_star: PredictionVector,
        samples: Sequence[PredictionVector],
        lambdas: Sequence[float],
        cfg: DlcConfig,
    ):
        if not samples:
            raise PreconditionError("dlc_loss needs at least one omega sample")
        if len(lambdas) != len(samples):
            raise PreconditionError(f"got {len(lambdas)} lambda values for {len(samples)} samples")
        self.task = task
        self.x = x
        self.omega_star = omega_star
        self.samples = list(samples)
        self.lambdas = [float(lam) for lam in lambdas]
        self.dist_sq = [omega_star.distance_sq(omega) for omega in self.samples]
        self.cfg = cfg
        self.h_star: Optional[Node] = None
        self.hinge_mean: Optional[Node] = None
        self._terms: List[Tuple[Node, Node, Node, PredictionVector, float]] = []

    def __call__(self, tape: ComputationTape, inputs: Sequence[Any], params: Mapping[str, Node], omega: Node) -> Node:
        cfg = self.cfg
        landscape = self.task.landscape(tape, self.x, params)
        h_star = landscape(omega)

        mu_node: Optional[Node] = None
        lam_node: Optional[Node] = None
        if cfg.trainable:
            lam_node = tape.sigmoid(params[LAMBDA_PARAM])
            mu_node = tape.exp(params[MU_PARAM])

        total: Optional[Node] = None
        self._terms = []
        for omega_sample, lam, dist_sq in zip(self.samples, self.lambdas, self.dist_sq):
            dist_node = tape.constant(dist_sq)
            h_omega = landscape(tape.constant(omega_sample.values))

            if lam_node is not None:
                one_minus = tape.sub(tape.constant(1.0), lam_node)
                tilde_node = tape.add(
                    tape.mul(one_minus, omega), tape.mul(lam_node, tape.constant(omega_sample.values))
                )
                omega_tilde = self.omega_star.replace(tilde_node.value)
                h_tilde = landscape(tilde_node)
                half_mu = tape.scale(mu_node, 0.5)
                con2_coef: Coefficient = half_mu
                con3_star: Coefficient = one_minus
                con3_omega: Coefficient = lam_node
                con3_coef: Coefficient = tape.mul(tape.mul(lam_node, one_minus), half_mu)
                lam = lam_node.item()
            else:
                omega_tilde = interpolate(self.omega_star, omega_sample, lam)
                h_tilde = landscape(tape.constant(omega_tilde.values))
                con2_coef = cfg.mu / 2.0
                con3_star = 1.0 - lam
                con3_omega = lam
                con3_coef = lam * (1.0 - lam) * cfg.mu / 2.0

            epsilon = tape.relu(tape.sub(h_star, h_tilde))
            gamma = tape.relu(tape.add(tape.sub(h_star, h_omega), _times(tape, con2_coef, dist_node)))
            rhs = tape.add(_times(tape, con3_star, h_star), _times(tape, con3_omega, h_omega))
            xi = tape.relu(tape.add(tape.sub(h_tilde, rhs), _times(tape, con3_coef, dist_node)))

            hinges = {"con1": epsilon, "con2": gamma, "con3": xi}
            summed = hinges[cfg.constraints[0]]
            for name in cfg.constraints[1:]:
                summed = tape.add(summed, hinges[name])
            total = summed if total is None else tape.add(total, summed)
            self._terms.append((epsilon, gamma, xi, omega_tilde, lam))

        self.h_star = h_star
        self.hinge_mean = tape.scale(total, 1.0 / len(self.samples))
        if cfg.rho == 0:
            return h_star
        return tape.add(h_star, tape.scale(self.hinge_mean, cfg.rho))

    def diagnostics(self) -> List[HingeTriple]:
        """Slacks of the last build, one triple per ω sample."""
        return [
            HingeTriple(
                epsilon=epsilon.item(), gamma=gamma.item(), xi=xi.item(),
                omega_sample=omega_sample, omega_tilde=omega_tilde, lam=lam,
            )
            for (epsilon, gamma, xi, omega_tilde, lam), omega_sample in zip(self._terms, self.samples)
        ]


def hinge_terms(diagnostics: Sequence[HingeTriple]) -> Dict[str, float]:
    """Mean slack of each constraint over the sampled ω."""
    return {
        "con1": float(np.mean([t.epsilon for t in diagnostics])),
        "con2": float(np.mean([t.gamma for t in diagnostics])),
        "con3": float(np.mean([t.xi for t in diagnostics])),
    }


def dlc_graph(
    task: "Task",
    x: Any,
    omega_star: PredictionVector,
    cfg: DlcConfig,
    rng: np.random.Generator,
    samples: Optional[Sequence[PredictionVector]] = None,
) -> DlcGraph:
    """Draw the ω samples (and λ values) of one datapoint and return its tape builder."""
    if samples is None:
        sampler = cfg.sampler or task.default_sampler()
        samples = sample_neighborhood(omega_star, sampler, cfg.n_samples, rng)
    if not samples:
        raise PreconditionError("dlc_loss needs at least one omega sample")
    if cfg.lambda_mode == "sampled":
        lambdas = [float(v) for v in rng.uniform(0.0, 1.0, size=len(samples))]
    else:
        lambdas = [cfg.lam] * len(samples)
    return DlcGraph(task, x, omega_star, samples, lambdas, cfg)


def dlc_loss(
    task: "Task",
    x: Any,
    omega_star: PredictionVector,
    params: ParamSet,
    cfg: DlcConfig,
    rng: np.random.Generator,
    samples: Optional[Sequence[PredictionVector]] = None,
) -> DlcEvaluation:
    """Evaluate h(ω*) + ρ·mean(ε + γ + ξ) and its gradient w.r.t. θ.

    h(ω*) is evaluated once and shared by the base term and every hinge.
    With ρ = 0 the hinge nodes are still recorded for diagnostics but are not
    connected to the loss, so value and gradient equal the plain task loss.
    Only the hinges named in ``cfg.constraints`` enter the sum.

    Args:
        task: task providing the loss landscape h_θ
        x: task input for this datapoint
        omega_star: ground-truth prediction
        params: network weights (plus learned λ/μ when ``cfg.trainable``)
        cfg: convexification hyperparameters
        rng: stream used for ω (and λ) sampling
        samples: explicit ω samples replacing the sampler draw
    """
    graph = dlc_graph(task, x, omega_star, cfg, rng, samples)
    value, tape = forward(graph, (), params, omega_star)
    grads = tape.backward()
    grads.pop(OMEGA)
    diagnostics = graph.diagnostics()
    return DlcEvaluation(
        loss=value,
        grads=grads,
        diagnostics=diagnostics,
        base_loss=graph.h_star.item(),
        hinge_mean=graph.hinge_mean.item(),
        hinge_terms=hinge_terms(diagnostics),
    )
