"""Tiny recurrent sequence classifier.

Random-walk sequences are labeled by the sign of their final value. The
prediction ω is a probability vector over the K classes and the loss is
the cross-entropy −Σ_k ω_k · log p_θ(x)_k of a single-layer tanh cell.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping

import numpy as np

from ..autodiff import ComputationTape, Node, ParamSet, Tensor
from ..convexification import Layout, NeighborhoodSampler, PredictionVector, Segment
from ..errors import ConfigError, LayoutError, ShapeMismatchError
from .base_task import Landscape, Sample, Task

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SequenceSample:
    sequence: Tensor
    label_one_hot: Tensor

    def __post_init__(self):
        sequence = np.asarray(self.sequence, dtype=np.float64).reshape(-1, 1)
        label = np.asarray(self.label_one_hot, dtype=np.float64)
        if label.ndim != 1 or np.count_nonzero(label) != 1 or label.sum() != 1.0 or label.max() != 1.0:
            raise LayoutError(f"label_one_hot is not a valid one-hot vector: {label}")
        object.__setattr__(self, "sequence", sequence)
        object.__setattr__(self, "label_one_hot", label)

    @property
    def label(self) -> int:
        return int(np.argmax(self.label_one_hot))


@dataclass
class SequenceDataConfig:
    n_samples: int = 200
    steps: int = 16
    drift: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.steps < 1:
            raise ConfigError("n_samples and steps must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SequenceDataConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sequence data fields: {sorted(unknown)}")
        return cls(**data)


def generate_sequence_dataset(cfg: Any) -> List[SequenceSample]:
    """Seeded random walks; class 1 when the walk ends above zero."""
    if isinstance(cfg, Mapping):
        cfg = SequenceDataConfig.from_dict(cfg)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for _ in range(cfg.n_samples):
        drift = cfg.drift if rng.uniform() < 0.5 else -cfg.drift
        walk = np.cumsum(drift + rng.standard_normal(cfg.steps)) / math.sqrt(cfg.steps)
        label = np.zeros(2)
        label[int(walk[-1] > 0.0)] = 1.0
        samples.append(SequenceSample(walk, label))
    return samples


class SequenceTask(Task):
    """Cross-entropy landscape of a tanh RNN over class distributions."""

    name = "sequence"
    description = "Random-walk sign classification with a single-layer tanh RNN"

    def __init__(self, hidden: int = 8, n_classes: int = 2, sigma: float = 1.0):
        if hidden < 1 or n_classes < 2:
            raise ConfigError("hidden must be positive and n_classes at least 2")
        self.hidden = hidden
        self.n_classes = n_classes
        self.sigma = sigma
        self.layout = Layout((Segment("label", 0, n_classes, "probability"),))

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        h, k = self.hidden, self.n_classes
        return ParamSet({
            "rnn.w_x": rng.standard_normal((1, h)),
            "rnn.w_h": rng.standard_normal((h, h)) / math.sqrt(h),
            "rnn.b_h": np.zeros(h),
            "rnn.w_o": rng.standard_normal((h, k)) / math.sqrt(h),
            "rnn.b_o": np.zeros(k),
        })

    def default_sampler(self) -> NeighborhoodSampler:
        return NeighborhoodSampler(sigma={"label": self.sigma}, mode="noisy-one-hot-softmax")

    def generate_dataset(self, cfg: Any) -> List[Sample]:
        if self.n_classes != 2:
            raise ConfigError("the random-walk generator only produces two classes")
        return [Sample(s, self.prediction(s.label_one_hot)) for s in generate_sequence_dataset(cfg)]

    def initial_omega(self, x: Any) -> PredictionVector:
        return self.prediction(np.full(self.n_classes, 1.0 / self.n_classes))

    def log_probabilities(self, tape: ComputationTape, x: SequenceSample, params: Mapping[str, Node]) -> Node:
        state = tape.constant(np.zeros((1, self.hidden)))
        for value in x.sequence:
            step = tape.constant(value.reshape(1, 1))
            pre = tape.add(tape.add(tape.matmul(step, params["rnn.w_x"]), tape.matmul(state, params["rnn.w_h"])), params["rnn.b_h"])
            state = tape.tanh(pre)
        logits = tape.add(tape.matmul(state, params["rnn.w_o"]), params["rnn.b_o"])
        return tape.log_softmax(tape.reshape(logits, (self.n_classes,)))

    def landscape(self, tape: ComputationTape, x: SequenceSample, params: Mapping[str, Node]) -> Landscape:
        if x.label_one_hot.size != self.n_classes:
            raise ShapeMismatchError(f"sample has {x.label_one_hot.size} classes, task expects {self.n_classes}")
        log_p = self.log_probabilities(tape, x, params)

        def cross_entropy(omega: Node) -> Node:
            self.layout.validate(omega.value)
            return tape.neg(tape.sum_reduce(tape.mul(omega, log_p)))

        return cross_entropy


def predict_distribution(task: SequenceTask, sample: SequenceSample, params: ParamSet) -> Tensor:
    """p_θ(x) as a plain array."""
    tape = ComputationTape()
    nodes = {name: tape.constant(value) for name, value in params.items()}
    return np.exp(task.log_probabilities(tape, sample, nodes).value)


def sequence_loss(sample: SequenceSample, params: ParamSet, omega: PredictionVector, task: SequenceTask = None):
    """Autodiff builder of the cross-entropy loss for ``sample``."""
    if task is None:
        task = SequenceTask(hidden=params["rnn.w_h"].shape[0], n_classes=sample.label_one_hot.size)
    task.layout.validate(omega.values)
    return task.loss_builder(sample)
