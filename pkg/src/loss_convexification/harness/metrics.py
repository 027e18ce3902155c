"""Registration error metrics: MSE(R), MSE(Euler) in degrees and MSE(T)."""
from typing import Dict, Sequence

import numpy as np

from ..convexification import PredictionVector, wrap_angle
from ..errors import ShapeMismatchError
from ..tasks.geometry import RigidMotion


def _motions(predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]):
    if len(predictions) != len(truths) or not predictions:
        raise ShapeMismatchError(f"need matching non-empty lists, got {len(predictions)} and {len(truths)}")
    return [RigidMotion.from_prediction(p) for p in predictions], [RigidMotion.from_prediction(t) for t in truths]


def mse_rotation(predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]) -> float:
    """Mean squared error over flattened rotation-matrix entries."""
    pred, true = _motions(predictions, truths)
    return float(np.mean([np.mean((p.rotation - t.rotation) ** 2) for p, t in zip(pred, true)]))


def mse_euler(predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]) -> float:
    """Mean squared Euler-angle error in degrees, differences wrapped to (−180, 180]."""
    pred, true = _motions(predictions, truths)
    errors = [np.degrees(wrap_angle(p.euler - t.euler)) for p, t in zip(pred, true)]
    return float(np.mean(np.square(errors)))


def mse_translation(predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]) -> float:
    pred, true = _motions(predictions, truths)
    return float(np.mean([np.mean((p.translation - t.translation) ** 2) for p, t in zip(pred, true)]))


def registration_metrics(
    predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]
) -> Dict[str, float]:
    return {
        "mse_rotation": mse_rotation(predictions, truths),
        "mse_euler_deg": mse_euler(predictions, truths),
        "mse_translation": mse_translation(predictions, truths),
    }


def classification_accuracy(predictions: Sequence[PredictionVector], truths: Sequence[PredictionVector]) -> float:
    """Share of probability predictions whose argmax matches the one-hot truth."""
    if len(predictions) != len(truths) or not predictions:
        raise ShapeMismatchError(f"need matching non-empty lists, got {len(predictions)} and {len(truths)}")
    hits = [int(np.argmax(p.values)) == int(np.argmax(t.values)) for p, t in zip(predictions, truths)]
    return float(np.mean(hits))
