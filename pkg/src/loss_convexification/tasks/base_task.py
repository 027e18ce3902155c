from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, List, Mapping, Tuple

import numpy as np

from ..autodiff import OMEGA, Builder, ComputationTape, Node, ParamSet, Tensor, forward
from ..convexification import Layout, NeighborhoodSampler, PredictionVector
from ..errors import NonFiniteError

# h(ω) on a shared tape: takes the ω node, returns a scalar loss node
Landscape = Callable[[Node], Node]


@dataclass(frozen=True, eq=False)
class Sample:
    """One datapoint: task input and its ground-truth prediction."""

    x: Any
    omega_star: PredictionVector


class Task(ABC):
    """Base template for iterative-model tasks.

    A task declares the layout of its prediction vector, builds its loss
    h_θ(ω) = ℓ(f(x; θ), ω) on a tape, and generates its own data.
    """

    name: str = "task"
    description: str = ""
    layout: Layout

    @property
    def omega_dim(self) -> int:
        return self.layout.dim

    def prediction(self, values: Any) -> PredictionVector:
        return PredictionVector(values, self.layout)

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return ParamSet()

    @abstractmethod
    def landscape(self, tape: ComputationTape, x: Any, params: Mapping[str, Node]) -> Landscape:
        """Record the ω-independent part of the loss and return h(ω)."""
        raise NotImplementedError("Task loss needs to be implemented")

    @abstractmethod
    def default_sampler(self) -> NeighborhoodSampler:
        raise NotImplementedError("Task sampler needs to be implemented")

    @abstractmethod
    def generate_dataset(self, cfg: Any) -> List[Sample]:
        raise NotImplementedError("Task dataset generator needs to be implemented")

    @abstractmethod
    def initial_omega(self, x: Any) -> PredictionVector:
        """Starting point of test-time iterations when none is provided."""
        raise NotImplementedError("Task initial prediction needs to be implemented")

    def loss_builder(self, x: Any) -> Builder:
        def build(tape: ComputationTape, inputs, params: Mapping[str, Node], omega: Node) -> Node:
            return self.landscape(tape, x, params)(omega)

        return build

    def evaluate(self, x: Any, params: ParamSet, omega: PredictionVector) -> float:
        value, _ = forward(self.loss_builder(x), (), params, omega)
        return value

    def evaluate_with_grad(self, x: Any, params: ParamSet, omega: PredictionVector) -> Tuple[float, Tensor]:
        """Loss and its gradient w.r.t. ω."""
        value, tape = forward(self.loss_builder(x), (), params, omega)
        grad = tape.backward()[OMEGA]
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient w.r.t. omega at {omega.values.tolist()}")
        return value, grad
