"""Point-cloud pair files.

Each pair is stored as ``<id>_src.xyz`` and ``<id>_tgt.xyz`` (one point per
line, whitespace separated, 17 significant digits) plus ``<id>_gt.json``
with the ground-truth motion, correspondence and generator settings.
"""
import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np

from ..errors import ConfigError, ShapeMismatchError
from .geometry import RigidMotion
from .registration import PointCloudPair, RegistrationDataConfig, generate_registration_dataset

logger = logging.getLogger(__name__)


def _paths(directory: str, pair_id: str) -> Dict[str, str]:
    return {
        "src": os.path.join(directory, f"{pair_id}_src.xyz"),
        "tgt": os.path.join(directory, f"{pair_id}_tgt.xyz"),
        "gt": os.path.join(directory, f"{pair_id}_gt.json"),
    }


def write_pair(pair: PointCloudPair, directory: str, cfg: Optional[RegistrationDataConfig] = None) -> Dict[str, str]:
    """Write one pair and return the three file paths."""
    os.makedirs(directory, exist_ok=True)
    paths = _paths(directory, pair.pair_id)
    np.savetxt(paths["src"], pair.source, fmt="%.17g")
    np.savetxt(paths["tgt"], pair.target, fmt="%.17g")
    motion = pair.motion
    record = {
        "euler": motion.euler.tolist(),
        "translation": motion.translation.tolist(),
        "permutation": pair.correspondence.tolist(),
        "generator": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
    }
    with open(paths["gt"], "w") as f:
        f.write(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return paths


def read_pair(directory: str, pair_id: str) -> PointCloudPair:
    paths = _paths(directory, pair_id)
    for path in paths.values():
        if not os.path.exists(path):
            raise ConfigError(f"missing point-cloud file: {path}")
    source = np.loadtxt(paths["src"], ndmin=2)
    target = np.loadtxt(paths["tgt"], ndmin=2)
    with open(paths["gt"], "r") as f:
        record = json.load(f)
    try:
        motion = RigidMotion(record["euler"], record["translation"])
    except KeyError as err:
        raise ConfigError(f"{paths['gt']} lacks field {err}") from None
    if motion.dim != source.shape[1]:
        raise ShapeMismatchError(f"{paths['gt']} describes a {motion.dim}-D motion for {source.shape[1]}-D points")
    return PointCloudPair(
        source=source,
        target=target,
        omega_star=motion.to_prediction(),
        correspondence=record["permutation"],
        pair_id=pair_id,
    )


def write_dataset(pairs: List[PointCloudPair], directory: str, cfg: Optional[RegistrationDataConfig] = None) -> List[str]:
    """Write every pair; returns the pair ids in order."""
    for pair in pairs:
        write_pair(pair, directory, cfg)
    logger.info("wrote %d point-cloud pairs to %s", len(pairs), directory)
    return [pair.pair_id for pair in pairs]


def read_dataset(directory: str) -> List[PointCloudPair]:
    """Read every ``*_gt.json`` pair in ``directory``, sorted by id."""
    if not os.path.isdir(directory):
        raise ConfigError(f"dataset directory does not exist: {directory}")
    ids = sorted(name[: -len("_gt.json")] for name in os.listdir(directory) if name.endswith("_gt.json"))
    return [read_pair(directory, pair_id) for pair_id in ids]


def load_or_generate(source: Any) -> List[PointCloudPair]:
    """A directory path reads pairs from disk; a config generates them."""
    if isinstance(source, str):
        return read_dataset(source)
    return generate_registration_dataset(source)
