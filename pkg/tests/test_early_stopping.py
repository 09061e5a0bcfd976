"""Unit tests for early stopping — transitions, patience, event keys."""
import math

import pytest

from adaptlab.early_stopping import EarlyStopping, State


@pytest.fixture
def es() -> EarlyStopping:
    return EarlyStopping(patience=2)


def test_initial_state_is_improving(es: EarlyStopping) -> None:
    assert es.state == State.IMPROVING
    assert es.best == math.inf


def test_first_update_improves(es: EarlyStopping) -> None:
    assert es.update(0.5) == "Improved"
    assert es.best == 0.5
    assert es.state == State.IMPROVING


def test_equal_error_is_not_improvement(es: EarlyStopping) -> None:
    es.update(0.5)
    assert es.update(0.5) is None
    assert es.state == State.PLATEAU


def test_plateau_back_to_improving(es: EarlyStopping) -> None:
    es.update(0.5)
    es.update(0.6)
    assert es.state == State.PLATEAU
    assert es.update(0.4) == "Improved"
    assert es.state == State.IMPROVING
    assert es.best == 0.4


def test_stop_after_patience_stale_epochs(es: EarlyStopping) -> None:
    es.update(0.5)
    assert es.update(0.7) is None
    assert es.update(0.6) == "Stop"
    assert es.state == State.STOPPED
    assert es.best == 0.5


def test_improvement_resets_stale_count(es: EarlyStopping) -> None:
    es.update(0.5)
    es.update(0.6)
    es.update(0.4)
    assert es.update(0.45) is None
    assert es.update(0.41) == "Stop"


def test_stopped_stays_stopped(es: EarlyStopping) -> None:
    es.update(0.5)
    es.update(0.5)
    es.update(0.5)
    assert es.update(0.0) == "Stop"
    assert es.state == State.STOPPED


def test_patience_one_stops_on_first_stale_epoch() -> None:
    es = EarlyStopping(patience=1)
    es.update(0.3)
    assert es.update(0.3) == "Stop"


def test_invalid_patience() -> None:
    with pytest.raises(ValueError, match="patience must be >= 1"):
        EarlyStopping(patience=0)
