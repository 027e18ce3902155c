"""Analytic loss functions with known star-convexity.

Oracles ignore θ and x; they give the audits and the inference loop
landscapes whose geometry is known in closed form.
"""
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np

from ..autodiff import ComputationTape, Node, ParamSet, Tensor
from ..convexification import NeighborhoodSampler, PredictionVector, free_layout
from ..errors import ConfigError
from .base_task import Landscape, Sample, Task

# (tape, ω node, ω* constant) -> scalar loss node
OracleFormula = Callable[[ComputationTape, Node, Node], Node]


class AnalyticOracle(Task):
    """A fixed function h(ω) tagged with its strong star-convexity modulus.

    Attributes:
        mu_true: modulus about ``omega_star``; ``None`` when not star-convex
        star_convex: whether h is star-convex about ``omega_star``
    """

    def __init__(
        self,
        name: str,
        description: str,
        formula: OracleFormula,
        omega_star: Any,
        mu_true: Optional[float],
        sigma: float = 1.0,
    ):
        self.name = name
        self.description = description
        self.formula = formula
        self.layout = free_layout(len(omega_star))
        self.omega_star = self.prediction(omega_star)
        self.mu_true = mu_true
        self.sigma = sigma

    @property
    def star_convex(self) -> bool:
        return self.mu_true is not None

    def __repr__(self) -> str:
        tag = "not star-convex" if self.mu_true is None else f"mu_true={self.mu_true}"
        return f"AnalyticOracle({self.name}, {tag})"

    def default_sampler(self) -> NeighborhoodSampler:
        return NeighborhoodSampler(default_sigma=self.sigma)

    def generate_dataset(self, cfg: Any = None) -> List[Sample]:
        return [Sample(None, self.omega_star)]

    def initial_omega(self, x: Any) -> PredictionVector:
        return self.prediction(np.zeros(self.omega_dim))

    def landscape(self, tape: ComputationTape, x: Any, params: Mapping[str, Node]) -> Landscape:
        center = tape.constant(self.omega_star.values)
        return lambda omega: self.formula(tape, omega, center)

    def value(self, omega: Any) -> float:
        return self.evaluate(None, ParamSet(), self.prediction(omega))


def _quadratic(scale: float) -> OracleFormula:
    def formula(tape, omega, center):
        return tape.scale(tape.squared_norm(tape.sub(omega, center)), scale)

    return formula


def _double_well(tape, omega, center):
    first = tape.index(omega, 0)
    well = tape.sub(tape.mul(first, first), tape.constant(1.0))
    value = tape.mul(well, well)
    if omega.shape[0] > 1:
        value = tape.add(value, tape.squared_norm(tape.index(omega, slice(1, None))))
    return value


def _cusp(tape, omega, center):
    shifted = tape.abs(tape.sub(omega, center))
    a, b = tape.index(shifted, 0), tape.index(shifted, 1)
    denominator = tape.add(tape.add(a, b), tape.constant(1e-12))
    ratio = tape.div(b, denominator)
    value = tape.mul(a, tape.add(tape.constant(1.0), ratio))
    if omega.shape[0] > 2:
        value = tape.add(value, tape.sum_reduce(tape.index(shifted, slice(2, None))))
    return value


def _flat(tape, omega, center):
    return tape.add(tape.scale(tape.sum_reduce(omega), 0.0), tape.constant(1.0))


def analytic_oracles(dim: int = 2, center: Optional[Tensor] = None) -> Dict[str, AnalyticOracle]:
    """Registry of oracle functions on R^dim.

    ``center`` is the minimizer of the quadratic family (default all ones);
    the double well sits at (1, 0, ..., 0) and the cusp at the origin.
    """
    if dim < 2:
        raise ConfigError(f"oracles need at least two coordinates, got dim={dim}")
    center = np.ones(dim) if center is None else np.asarray(center, dtype=np.float64)
    well = np.zeros(dim)
    well[0] = 1.0
    oracles = [
        AnalyticOracle("quadratic", "||ω − c||²", _quadratic(1.0), center, mu_true=2.0),
        AnalyticOracle("scaled-quadratic", "3·||ω − c||²", _quadratic(3.0), center, mu_true=6.0),
        AnalyticOracle("concave", "−||ω − c||²", _quadratic(-1.0), center, mu_true=None),
        AnalyticOracle(
            "double-well", "(ω₀² − 1)² + Σ_{j≥1} ω_j²", _double_well, well, mu_true=None
        ),
        AnalyticOracle(
            "cusp", "|ω₁|·(1 + |ω₂| / (|ω₁| + |ω₂| + 1e-12)) + Σ_{j≥3} |ω_j|", _cusp, np.zeros(dim), mu_true=0.0
        ),
        AnalyticOracle("flat", "constant 1", _flat, center, mu_true=0.0),
    ]
    return {oracle.name: oracle for oracle in oracles}
