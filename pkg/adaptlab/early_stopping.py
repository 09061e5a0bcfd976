"""
Early stopping on CV error: IMPROVING / PLATEAU / STOPPED.
update() returns an event key ("Improved" or "Stop") when the caller should act.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import Literal


class State(Enum):
    IMPROVING = "improving"
    PLATEAU = "plateau"
    STOPPED = "stopped"


# Event key returned when the caller should snapshot the model or stop training.
StopEvent = Literal["Improved", "Stop"]


class EarlyStopping:
    """
    Tracks the best CV error seen so far. Call update(cv_error) once per epoch;
    returns "Improved" when the error strictly improves on the best so far,
    "Stop" once `patience` consecutive epochs pass without improvement, or None.
    """

    def __init__(self, patience: int) -> None:
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience!r}")
        self.patience = int(patience)
        self._state = State.IMPROVING
        self._best = math.inf
        self._stale = 0

    @property
    def state(self) -> State:
        return self._state

    @property
    def best(self) -> float:
        return self._best

    def update(self, cv_error: float) -> StopEvent | None:
        if self._state == State.STOPPED:
            return "Stop"
        if cv_error < self._best:
            self._best = cv_error
            self._stale = 0
            self._state = State.IMPROVING
            return "Improved"

        self._stale += 1
        if self._stale >= self.patience:
            self._state = State.STOPPED
            return "Stop"
        self._state = State.PLATEAU
        return None
