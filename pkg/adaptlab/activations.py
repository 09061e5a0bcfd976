"""
Hidden-layer nonlinearities, their derivatives, and the LHUC amplitude function.
"""
from __future__ import annotations

from typing import Callable, Literal

import numpy as np

ActivationName = Literal["sigmoid", "tanh", "relu", "identity"]

# Stable ids for the checkpoint spec block.
ACTIVATION_IDS: dict[str, int] = {"sigmoid": 0, "tanh": 1, "relu": 2, "identity": 3}


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_grad(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    return out * (1.0 - out)


def _tanh_grad(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    return 1.0 - out * out


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _relu_grad(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, 0.0)


def _identity(z: np.ndarray) -> np.ndarray:
    return z


def _identity_grad(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    return np.ones_like(z)


# name -> (f(z), f'(z) given z and f(z))
ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray, np.ndarray], np.ndarray]]] = {
    "sigmoid": (sigmoid, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"hidden_activation must be one of {sorted(ACTIVATIONS)}, got {name!r}"
        ) from None


# Past about r = 37, float64 rounds 2 * sigmoid(r) to exactly 2.0; clipping
# r keeps every amplitude strictly inside (0, 2).
AMPLITUDE_CLIP = 30.0


def amplitude(r: np.ndarray) -> np.ndarray:
    """
    LHUC amplitude a(r) = 2 / (1 + exp(-r)), elementwise, range (0, 2).
    r is clipped to +/-AMPLITUDE_CLIP first, so the gate saturates at
    2 * sigmoid(30) = 2 - 1.9e-13 instead of reaching 2.
    """
    r = np.clip(np.asarray(r, dtype=np.float64), -AMPLITUDE_CLIP, AMPLITUDE_CLIP)
    return 2.0 * sigmoid(np.asarray(r))


def amplitude_grad(a: np.ndarray) -> np.ndarray:
    """da/dr expressed through a = a(r): a * (1 - a/2)."""
    return a * (1.0 - 0.5 * a)
