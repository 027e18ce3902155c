"""Rigid motions in 2D and 3D.

Euler convention: ZYX, radians. For D = 3 the rotation is
R = Rz(θz)·Ry(θy)·Rx(θx) with the angles stored in that order; for D = 2 a
single angle θ is stored. Prediction vectors hold the angles followed by
the translation.
"""
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..autodiff import ComputationTape, Node, Tensor
from ..convexification import Layout, PredictionVector, Segment, wrap_angle
from ..errors import ShapeMismatchError


def euler_size(dim: int) -> int:
    if dim == 2:
        return 1
    if dim == 3:
        return 3
    raise ShapeMismatchError(f"rigid motions are defined for D in (2, 3), got {dim}")


def registration_layout(dim: int) -> Layout:
    n_angles = euler_size(dim)
    return Layout((
        Segment("euler", 0, n_angles, "angle"),
        Segment("translation", n_angles, n_angles + dim, "translation"),
    ))


def _rz(angle: float) -> Tensor:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(angle: float) -> Tensor:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(angle: float) -> Tensor:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_matrix(euler: Any) -> Tensor:
    """Proper rotation for one angle (2D) or ZYX Euler angles (3D)."""
    euler = np.atleast_1d(np.asarray(euler, dtype=np.float64))
    if euler.size == 1:
        c, s = np.cos(euler[0]), np.sin(euler[0])
        return np.array([[c, -s], [s, c]])
    if euler.size == 3:
        return _rz(euler[0]) @ _ry(euler[1]) @ _rx(euler[2])
    raise ShapeMismatchError(f"expected 1 or 3 Euler angles, got {euler.size}")


def euler_from_rotation(rotation: Tensor) -> Tensor:
    """Inverse of :func:`rotation_matrix`, angles wrapped into (-π, π]."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape == (2, 2):
        return wrap_angle(np.array([np.arctan2(rotation[1, 0], rotation[0, 0])]))
    if rotation.shape == (3, 3):
        theta_y = np.arcsin(np.clip(-rotation[2, 0], -1.0, 1.0))
        theta_z = np.arctan2(rotation[1, 0], rotation[0, 0])
        theta_x = np.arctan2(rotation[2, 1], rotation[2, 2])
        return wrap_angle(np.array([theta_z, theta_y, theta_x]))
    raise ShapeMismatchError(f"expected a 2x2 or 3x3 rotation, got {rotation.shape}")


@dataclass(frozen=True, eq=False)
class RigidMotion:
    euler: Tensor
    translation: Tensor

    def __post_init__(self):
        euler = np.atleast_1d(np.asarray(self.euler, dtype=np.float64))
        translation = np.atleast_1d(np.asarray(self.translation, dtype=np.float64))
        if euler.size != euler_size(translation.size):
            raise ShapeMismatchError(
                f"{euler.size} Euler angles do not match a {translation.size}-D translation"
            )
        object.__setattr__(self, "euler", euler)
        object.__setattr__(self, "translation", translation)

    @property
    def dim(self) -> int:
        return self.translation.size

    @property
    def rotation(self) -> Tensor:
        return rotation_matrix(self.euler)

    @classmethod
    def identity(cls, dim: int) -> "RigidMotion":
        return cls(np.zeros(euler_size(dim)), np.zeros(dim))

    @classmethod
    def from_matrix(cls, rotation: Tensor, translation: Tensor) -> "RigidMotion":
        return cls(euler_from_rotation(rotation), translation)

    @classmethod
    def from_prediction(cls, omega: PredictionVector) -> "RigidMotion":
        return cls(omega.segment("euler"), omega.segment("translation"))

    def to_prediction(self) -> PredictionVector:
        return PredictionVector(np.concatenate([self.euler, self.translation]), registration_layout(self.dim))

    def inverse(self) -> "RigidMotion":
        rotation = self.rotation
        return RigidMotion.from_matrix(rotation.T, -rotation.T @ self.translation)


def apply_transform(points: Any, motion: RigidMotion) -> Tensor:
    """y_i = R·x_i + t for every row of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != motion.dim:
        raise ShapeMismatchError(f"cannot apply a {motion.dim}-D motion to points of shape {points.shape}")
    return points @ motion.rotation.T + motion.translation


def _tape_planar_rotation(tape: ComputationTape, angle: Node, zero: Node, one: Node, axis: str) -> Node:
    c, s = tape.cos(angle), tape.sin(angle)
    minus_s = tape.neg(s)
    entries = {
        "z": [c, minus_s, zero, s, c, zero, zero, zero, one],
        "y": [c, zero, s, zero, one, zero, minus_s, zero, c],
        "x": [one, zero, zero, zero, c, minus_s, zero, s, c],
    }[axis]
    return tape.reshape(tape.stack(entries), (3, 3))


def tape_rotation(tape: ComputationTape, euler: Node) -> Node:
    """Differentiable :func:`rotation_matrix` of a 1- or 3-vector node."""
    if euler.shape == (1,):
        angle = tape.index(euler, 0)
        c, s = tape.cos(angle), tape.sin(angle)
        return tape.reshape(tape.stack([c, tape.neg(s), s, c]), (2, 2))
    if euler.shape == (3,):
        zero, one = tape.constant(0.0), tape.constant(1.0)
        rz = _tape_planar_rotation(tape, tape.index(euler, 0), zero, one, "z")
        ry = _tape_planar_rotation(tape, tape.index(euler, 1), zero, one, "y")
        rx = _tape_planar_rotation(tape, tape.index(euler, 2), zero, one, "x")
        return tape.matmul(tape.matmul(rz, ry), rx)
    raise ShapeMismatchError(f"expected 1 or 3 Euler angles, got shape {euler.shape}")
