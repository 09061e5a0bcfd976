"""Unit tests for activations and the LHUC amplitude function."""
import math
import warnings

import numpy as np
import pytest

from adaptlab.activations import (
    ACTIVATION_IDS,
    ACTIVATIONS,
    AMPLITUDE_CLIP,
    amplitude,
    amplitude_grad,
    get_activation,
    sigmoid,
)


def test_sigmoid_is_stable_at_extremes() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out[0] == 0.0
    assert out[1] == 0.5
    assert out[2] == 1.0


@pytest.mark.parametrize("name", sorted(ACTIVATIONS))
def test_derivatives_match_finite_differences(name: str) -> None:
    f, df = get_activation(name)
    # Keep relu away from its kink.
    z = np.array([-2.3, -0.7, 0.4, 1.9])
    eps = 1e-6
    numeric = (f(z + eps) - f(z - eps)) / (2 * eps)
    np.testing.assert_allclose(df(z, f(z)), numeric, rtol=1e-7, atol=1e-9)


def test_unknown_activation() -> None:
    with pytest.raises(ValueError, match="hidden_activation must be one of"):
        get_activation("softplus")


def test_activation_ids_cover_every_activation() -> None:
    assert set(ACTIVATION_IDS) == set(ACTIVATIONS)
    assert len(set(ACTIVATION_IDS.values())) == len(ACTIVATION_IDS)


def test_amplitude_examples() -> None:
    assert amplitude(np.array([0.0]))[0] == 1.0
    assert amplitude(np.array([math.log(3)]))[0] == pytest.approx(1.5, abs=1e-15)
    assert amplitude(np.array([-math.log(3)]))[0] == pytest.approx(0.5, abs=1e-15)


def test_amplitude_range_and_symmetry() -> None:
    r = np.linspace(-30, 30, 601)
    a = amplitude(r)
    assert np.all(a > 0) and np.all(a < 2)
    assert np.all(np.diff(a) > 0)
    np.testing.assert_allclose(a + amplitude(-r), 2.0, atol=1e-12)


def test_amplitude_stays_below_two_for_large_r() -> None:
    r = np.array([36.0, 37.0, 40.0, 100.0, 1e6, np.finfo(np.float64).max])
    a = amplitude(r)
    assert np.all(a < 2.0)
    np.testing.assert_array_equal(a, amplitude(np.array([AMPLITUDE_CLIP]))[0])
    lo = amplitude(-r)
    assert np.all(lo > 0.0)
    np.testing.assert_allclose(a + lo, 2.0, atol=1e-12)


def test_amplitude_grad_matches_finite_differences() -> None:
    r = np.array([-3.0, -0.5, 0.0, 0.8, 2.5])
    eps = 1e-6
    numeric = (amplitude(r + eps) - amplitude(r - eps)) / (2 * eps)
    np.testing.assert_allclose(amplitude_grad(amplitude(r)), numeric, rtol=1e-7)
