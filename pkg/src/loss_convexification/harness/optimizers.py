"""First-order optimizers over a ParamSet.

State is kept per parameter name, mirroring the per-tensor ``state`` dict of
torch optimizers, and is serializable for checkpoints.
"""
from typing import Any, Dict, Mapping

import numpy as np

from ..autodiff import ParamSet, Tensor
from ..errors import ConfigError, NonFiniteError


class Optimizer:
    """Base class: ``step`` returns a new ParamSet, never mutates the old one."""

    name = "optimizer"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: Dict[str, Dict[str, Any]] = {}
        self.steps = 0

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        self.steps += 1
        updates = {}
        for name, value in params.items():
            grad = np.asarray(grads[name], dtype=np.float64)
            if self.weight_decay:
                grad = grad + self.weight_decay * value
            updates[name] = self._update(name, value, grad)
            if not np.all(np.isfinite(updates[name])):
                raise NonFiniteError(f"optimizer produced non-finite values for '{name}'")
        return params.replace(updates)

    def _update(self, name: str, value: Tensor, grad: Tensor) -> Tensor:
        raise NotImplementedError("Optimizer update needs to be implemented")

    def state_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "steps": self.steps,
            "state": {
                name: {key: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for key, v in slots.items()}
                for name, slots in self.state.items()
            },
        }

    def load_state_dict(self, data: Mapping[str, Any]) -> None:
        if data.get("name") != self.name:
            raise ConfigError(f"optimizer state belongs to '{data.get('name')}', not '{self.name}'")
        self.steps = int(data["steps"])
        self.state = {
            name: {key: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for key, v in slots.items()}
            for name, slots in data["state"].items()
        }


class SGD(Optimizer):
    name = "sgd"

    def __init__(self, lr: float = 1e-2, weight_decay: float = 0.0, momentum: float = 0.0):
        super().__init__(lr, weight_decay)
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum

    def _update(self, name: str, value: Tensor, grad: Tensor) -> Tensor:
        if self.momentum:
            slots = self.state.setdefault(name, {"buf": np.zeros_like(value)})
            slots["buf"] = self.momentum * slots["buf"] + grad
            grad = slots["buf"]
        return value - self.lr * grad


class Adam(Optimizer):
    """Adam with L2 weight decay folded into the gradient."""

    name = "adam"

    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr, weight_decay)
        beta1, beta2 = betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        self.betas = (float(beta1), float(beta2))
        self.eps = eps

    def _update(self, name: str, value: Tensor, grad: Tensor) -> Tensor:
        beta1, beta2 = self.betas
        slots = self.state.setdefault(name, {"m": np.zeros_like(value), "v": np.zeros_like(value)})
        slots["m"] = beta1 * slots["m"] + (1.0 - beta1) * grad
        slots["v"] = beta2 * slots["v"] + (1.0 - beta2) * grad * grad
        m_hat = slots["m"] / (1.0 - beta1 ** self.steps)
        v_hat = slots["v"] / (1.0 - beta2 ** self.steps)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def build_optimizer(cfg: Any) -> Optimizer:
    """Optimizer from an ``OptimizerConfig``."""
    if cfg.name == "adam":
        return Adam(lr=cfg.lr, weight_decay=cfg.weight_decay, betas=tuple(cfg.betas), eps=cfg.eps)
    if cfg.name == "sgd":
        return SGD(lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    raise ConfigError(f"unknown optimizer '{cfg.name}', expected one of {sorted(OPTIMIZERS)}")
