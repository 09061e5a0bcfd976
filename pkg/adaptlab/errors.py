"""
Exception types. Each one subclasses a built-in so callers can catch either.
"""
from __future__ import annotations


class ShapeError(ValueError):
    """Array shapes disagree with the network spec at a given layer."""

    def __init__(self, message: str, layer: int | None = None) -> None:
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class CheckpointError(ValueError):
    """Container file cannot be decoded."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ArtifactMismatchError(CheckpointError):
    """Speaker artifact was produced against a different SI model."""


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite."""


class InsufficientDataError(ValueError):
    pass
