"""Versioned, checksummed training checkpoints.

File layout: one ASCII header line

    loss-convexification-checkpoint v1 sha256=<hex digest> bytes=<payload length>

followed by the payload, compact JSON with sorted keys. Loading verifies
the version, the length and the digest before anything is decoded.
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping

import numpy as np

from ..autodiff import ParamSet
from ..errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError

logger = logging.getLogger(__name__)

MAGIC = "loss-convexification-checkpoint"
VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    """Training state after ``epoch`` completed epochs.

    Attributes:
        params: network weights (and learned λ/μ when trainable)
        config: echo of the TrainConfig that produced them
        epoch: completed epochs
        rng_state: bit-generator states of the shuffle and sampling streams
        optimizer_state: serialized optimizer slots
        history: one record per update with ``base`` and ``hinge`` kept apart
    """

    params: ParamSet
    config: Dict[str, Any]
    epoch: int
    rng_state: Dict[str, Any]
    optimizer_state: Dict[str, Any]
    history: List[Dict[str, Any]] = field(default_factory=list)

    def to_payload(self) -> Dict[str, Any]:
        return {
            "params": {
                name: {"shape": list(value.shape), "data": value.ravel().tolist()}
                for name, value in self.params.items()
            },
            "param_order": list(self.params),
            "config": self.config,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "optimizer_state": self.optimizer_state,
            "history": self.history,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "Checkpoint":
        tensors = payload["params"]
        params = ParamSet({
            name: np.array(tensors[name]["data"], dtype=np.float64).reshape(tensors[name]["shape"])
            for name in payload["param_order"]
        })
        return cls(
            params=params,
            config=payload["config"],
            epoch=payload["epoch"],
            rng_state=payload["rng_state"],
            optimizer_state=payload["optimizer_state"],
            history=payload["history"],
        )


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    try:
        payload = json.dumps(
            checkpoint.to_payload(), sort_keys=True, separators=(",", ":"), allow_nan=False
        ).encode("utf-8")
    except ValueError as err:
        raise CheckpointError(f"checkpoint holds non-serializable values: {err}") from None
    digest = hashlib.sha256(payload).hexdigest()
    header = f"{MAGIC} v{VERSION} sha256={digest} bytes={len(payload)}\n".encode("ascii")
    return header + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    header, sep, payload = blob.partition(b"\n")
    if not sep:
        raise CorruptCheckpointError("checkpoint header is missing")
    try:
        magic, version, digest_field, length_field = header.decode("ascii").split(" ")
    except (UnicodeDecodeError, ValueError):
        raise CorruptCheckpointError("checkpoint header is malformed") from None
    if magic != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint file (magic '{magic}')")
    if version != f"v{VERSION}":
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected v{VERSION})")
    if length_field != f"bytes={len(payload)}":
        raise CorruptCheckpointError(f"payload length {len(payload)} does not match header '{length_field}'")
    if digest_field != f"sha256={hashlib.sha256(payload).hexdigest()}":
        raise CorruptCheckpointError("payload checksum mismatch")
    try:
        return Checkpoint.from_payload(json.loads(payload.decode("utf-8")))
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptCheckpointError(f"checkpoint payload is invalid: {err}") from None


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(checkpoint))
    logger.info("checkpoint saved to %s (epoch %d)", path, checkpoint.epoch)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
