"""The convexification training loop.

Per update: pick the next datapoint of the seeded shuffle, sample ω around
its ground truth, form the interpolated ω̃, evaluate the composite loss
and take one optimizer step. With ``use_dlc=False`` the same loop trains
on the plain task loss h(ω*).
"""
import logging
import os
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import OMEGA, ParamSet, Tensor, forward
from ..convexification import CONSTRAINTS, dlc_loss
from ..errors import NonFiniteError, NumericAbortError, PreconditionError
from ..tasks import build_task
from ..tasks.base_task import Sample, Task
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .optimizers import build_optimizer

logger = logging.getLogger(__name__)


def _plain_loss(task: Task, sample: Sample, params: ParamSet) -> Tuple[float, Dict[str, Tensor]]:
    value, tape = forward(task.loss_builder(sample.x), (), params, sample.omega_star)
    grads = tape.backward()
    grads.pop(OMEGA)
    return value, grads


class Trainer:
    """Stateful runner of the training loop.

    Three independent streams are spawned from ``cfg.seed``: weight
    initialization, the per-epoch shuffle and ω/λ sampling.
    """

    def __init__(self, cfg: TrainConfig, task: Optional[Task] = None):
        self.cfg = cfg
        self.task = task or build_task(cfg.task, **cfg.task_options)
        init_seq, shuffle_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.sample_rng = np.random.default_rng(sample_seq)
        params = self.task.init_params(np.random.default_rng(init_seq))
        if cfg.use_dlc and cfg.dlc.trainable:
            params = params.extend(cfg.dlc.trainable_params())
        self.params = params
        self.optimizer = build_optimizer(cfg.optimizer)
        self.epoch = 0
        self.history: List[Dict[str, Any]] = []
        self.step_times: List[float] = []

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, task: Optional[Task] = None) -> "Trainer":
        """Restore weights, optimizer slots, rng streams and history."""
        trainer = cls(TrainConfig.from_dict(checkpoint.config), task)
        trainer.params = checkpoint.params
        trainer.optimizer.load_state_dict(checkpoint.optimizer_state)
        trainer.shuffle_rng.bit_generator.state = checkpoint.rng_state["shuffle"]
        trainer.sample_rng.bit_generator.state = checkpoint.rng_state["sample"]
        trainer.epoch = checkpoint.epoch
        trainer.history = [dict(record) for record in checkpoint.history]
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            config=self.cfg.to_dict(),
            epoch=self.epoch,
            rng_state={
                "shuffle": self.shuffle_rng.bit_generator.state,
                "sample": self.sample_rng.bit_generator.state,
            },
            optimizer_state=self.optimizer.state_dict(),
            history=[dict(record) for record in self.history],
        )

    def _evaluate(self, sample: Sample) -> Tuple[Dict[str, float], Dict[str, Tensor]]:
        """Loss record (total, base, hinge mean and per-constraint slacks) of one datapoint with its gradients."""
        if not self.cfg.use_dlc:
            value, grads = _plain_loss(self.task, sample, self.params)
            return {"total": value, "base": value, "hinge": 0.0, **dict.fromkeys(CONSTRAINTS, 0.0)}, grads
        evaluation = dlc_loss(self.task, sample.x, sample.omega_star, self.params, self.cfg.dlc, self.sample_rng)
        record = {"total": evaluation.loss, "base": evaluation.base_loss, "hinge": evaluation.hinge_mean}
        record.update(evaluation.hinge_terms)
        return record, evaluation.grads

    def _update(self, batch: Sequence[int], dataset: Sequence[Sample], step: int) -> None:
        started = time.perf_counter()
        summed: Optional[Dict[str, Tensor]] = None
        for index in batch:
            losses, grads = self._evaluate(dataset[index])
            total = losses["total"]
            if not np.isfinite(total):
                raise NonFiniteError(f"non-finite loss {total} at datapoint {index}")
            summed = grads if summed is None else {name: summed[name] + grads[name] for name in summed}
            self.history.append({"epoch": self.epoch, "step": step, "index": int(index), **losses})
            logger.debug("epoch %d step %d datapoint %d: total %.6e", self.epoch, step, index, total)
        if len(batch) > 1:
            summed = {name: value / len(batch) for name, value in summed.items()}
        self.params = self.optimizer.step(self.params, summed)
        self.step_times.append(time.perf_counter() - started)

    def fit(self, dataset: Sequence[Sample]) -> Checkpoint:
        """Train until ``cfg.epochs`` epochs are complete and return the final checkpoint.

        Raises:
            NumericAbortError: a loss or update became non-finite; carries the
                checkpoint taken at the end of the last completed epoch.
        """
        if not dataset:
            raise PreconditionError("training needs a non-empty dataset")
        last_good = self.checkpoint()
        step = self.history[-1]["step"] + 1 if self.history else 0
        while self.epoch < self.cfg.epochs:
            started = time.perf_counter()
            order = self.shuffle_rng.permutation(len(dataset))
            first = len(self.history)
            try:
                for offset in range(0, len(order), self.cfg.batch_size):
                    self._update(order[offset:offset + self.cfg.batch_size], dataset, step)
                    step += 1
            except NonFiniteError as err:
                logger.error("training aborted in epoch %d: %s", self.epoch, err)
                raise NumericAbortError(str(err), checkpoint=last_good) from err
            self.epoch += 1
            records = self.history[first:]
            logger.info(
                "epoch %d/%d: base %.6e hinge %.6e (%.2fs)",
                self.epoch,
                self.cfg.epochs,
                float(np.mean([r["base"] for r in records])),
                float(np.mean([r["hinge"] for r in records])),
                time.perf_counter() - started,
            )
            last_good = self.checkpoint()
            if self.cfg.checkpoint_dir:
                save_checkpoint(last_good, os.path.join(self.cfg.checkpoint_dir, f"epoch_{self.epoch:03d}.ckpt"))
        return last_good


def train(cfg: TrainConfig, dataset: Sequence[Sample], task: Optional[Task] = None) -> Checkpoint:
    """Train from scratch and return the final checkpoint."""
    return Trainer(cfg, task).fit(dataset)
