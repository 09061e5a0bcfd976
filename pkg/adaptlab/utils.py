from __future__ import annotations

import hashlib
import logging
from typing import Any

import numpy as np

logger = logging.getLogger("adaptlab.utils")


def sanitize_log_message(msg: Any) -> str:
    """Escapes control characters like newlines and carriage returns to prevent log injection."""
    return str(msg).replace("\n", "\\n").replace("\r", "\\r")


def derive_seed(base: int, *parts: Any) -> int:
    """
    Stable 63-bit seed from a base seed and any number of identifying parts.

    Uses SHA-256 over the repr of the parts so the result does not depend on
    PYTHONHASHSEED or the process that computes it.
    """
    h = hashlib.sha256(repr((int(base),) + tuple(parts)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
