"""Tests for the finite-difference checker and the loop-based reference implementations."""
from unittest.mock import patch

import numpy as np
import pytest

from adaptlab.adapt import LhucParams, blend_targets, insert_lhuc
from adaptlab.errors import DivergenceError, ShapeError
from adaptlab.nn import (
    GradientSet,
    Model,
    NetworkParams,
    NetworkSpec,
    cross_entropy,
    model_backward,
    model_forward,
    softmax,
)
from adaptlab.oracle import (
    extended_loss,
    gradcheck,
    gradcheck_fixture,
    numeric_gradient,
    reference_forward,
    reference_kld_loss,
    reference_loss,
    reference_model_forward,
    relative_error,
)


@pytest.fixture
def seeded_model() -> Model:
    spec = NetworkSpec(5, (7, 4), 3, hidden_activation="tanh")
    return Model(spec, NetworkParams.init(spec, seed=21))


def test_numeric_gradient_of_square() -> None:
    (g,) = numeric_gradient(lambda ps: float(ps[0][0] ** 2), [np.array([3.0])], epsilon=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_numeric_gradient_fourth_order_is_exact_on_cubics() -> None:
    (g,) = numeric_gradient(lambda ps: float(ps[0][0] ** 3), [np.array([2.0])], epsilon=1e-3, order=4)
    assert g[0] == pytest.approx(12.0, abs=1e-8)


def test_numeric_gradient_of_constant() -> None:
    grads = numeric_gradient(lambda ps: 4.2, [np.ones((2, 3)), np.ones(4)])
    assert all(not np.any(g) for g in grads)
    assert [g.shape for g in grads] == [(2, 3), (4,)]


def test_numeric_gradient_leaves_params_untouched() -> None:
    p = np.array([1.0, 2.0])
    numeric_gradient(lambda ps: float(np.sum(ps[0] ** 2)), [p])
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_numeric_gradient_validation() -> None:
    with pytest.raises(ValueError, match="epsilon must be > 0"):
        numeric_gradient(lambda ps: 0.0, [np.zeros(1)], epsilon=0.0)
    with pytest.raises(ValueError, match="order must be one of"):
        numeric_gradient(lambda ps: 0.0, [np.zeros(1)], order=3)


def test_numeric_gradient_non_finite_loss() -> None:
    with pytest.raises(DivergenceError, match="tensor 0 coordinate 1"):
        numeric_gradient(lambda ps: float("nan") if ps[0][1] != 0 else 0.0, [np.zeros(2)])


def test_relative_error_floor() -> None:
    err = relative_error(np.array([1.0, 0.0, 1e-9]), np.array([1.0, 0.0, 2e-9]))
    np.testing.assert_allclose(err, [0.0, 0.0, 1e-9 / 1e-8])


# -- reference forward ------------------------------------------------------------

def test_reference_forward_matches_engine(seeded_model: Model) -> None:
    batch = np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_allclose(
        reference_model_forward(seeded_model, batch), model_forward(seeded_model, batch), atol=1e-10, rtol=0
    )


@pytest.mark.parametrize("seed", range(10))
def test_reference_forward_matches_engine_on_fixtures(seed: int) -> None:
    model, batch, _ = gradcheck_fixture(seed)
    np.testing.assert_allclose(reference_model_forward(model, batch), model_forward(model, batch), atol=1e-10, rtol=0)


def test_zero_weight_net_is_uniform() -> None:
    spec = NetworkSpec(3, (4,), 5)
    out = reference_forward(NetworkParams.zeros(spec), spec, np.ones((2, 3)))
    np.testing.assert_allclose(out, 0.2, atol=1e-15)


def test_zero_gates_equal_ungated(seeded_model: Model) -> None:
    batch = np.random.default_rng(1).normal(size=(4, 5))
    gated = reference_forward(seeded_model.params, seeded_model.spec, batch,
                              gates=LhucParams.zeros(seeded_model.spec.hidden_dims).r)
    np.testing.assert_array_equal(gated, reference_forward(seeded_model.params, seeded_model.spec, batch))
    np.testing.assert_array_equal(reference_model_forward(insert_lhuc(seeded_model), batch), gated)


def test_reference_forward_shape_errors(seeded_model: Model) -> None:
    with pytest.raises(ShapeError, match="layer 1"):
        reference_forward(seeded_model.params, seeded_model.spec, np.ones((2, 4)))
    bad_spec = NetworkSpec(5, (8, 4), 3)
    with pytest.raises(ShapeError, match="layer 1: weight shape"):
        reference_forward(seeded_model.params, bad_spec, np.ones((2, 5)))


# -- reference losses ---------------------------------------------------------------

def test_reference_loss_matches_engine() -> None:
    rng = np.random.default_rng(2)
    p = softmax(rng.normal(size=(8, 4)))
    t = softmax(rng.normal(size=(8, 4)))
    assert reference_loss(p, t) == pytest.approx(cross_entropy(p, t), abs=1e-12)


def test_reference_loss_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        reference_loss(np.ones((2, 3)) / 3, np.ones((2, 2)) / 2)


def test_kld_loss_at_zero_rho_is_hard_ce() -> None:
    rng = np.random.default_rng(3)
    p = softmax(rng.normal(size=(5, 4)))
    si = softmax(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    hard = np.eye(4)[labels]
    assert reference_kld_loss(p, labels, si, 0.0) == reference_loss(p, hard)


@pytest.mark.parametrize("rho", [0.0625, 0.125, 0.25, 0.5, 1.0])
def test_kld_decomposition_identity(rho: float) -> None:
    rng = np.random.default_rng(4)
    p = softmax(rng.normal(size=(9, 6)))
    si = softmax(rng.normal(size=(9, 6)))
    labels = rng.integers(0, 6, size=9)
    blended = reference_loss(p, blend_targets(labels, si, rho))
    assert reference_kld_loss(p, labels, si, rho) == pytest.approx(blended, abs=1e-12)


def test_extended_loss_matches_engine(seeded_model: Model) -> None:
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(6, 5))
    targets = softmax(rng.normal(size=(6, 3)))
    expected = cross_entropy(model_forward(seeded_model, batch), targets)
    assert float(extended_loss(seeded_model, batch, targets)) == pytest.approx(expected, abs=1e-12)


# -- gradcheck ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_fixture_suite(seed: int) -> None:
    model, batch, targets = gradcheck_fixture(seed)
    report = gradcheck(model, batch, targets, epsilon=1e-4, tolerance=1e-5)
    assert report.passed, report.format()
    assert report.checked > 0
    assert (report.order, report.epsilon) == (2, 1e-4)


@pytest.mark.parametrize("seed", [0, 3, 5])
def test_fourth_order_stencil_tightens_the_check(seed: int) -> None:
    model, batch, targets = gradcheck_fixture(seed)
    two_point = gradcheck(model, batch, targets)
    five_point = gradcheck(model, batch, targets, order=4)
    assert two_point.passed and five_point.passed
    assert five_point.worst_error < two_point.worst_error


def test_fixtures_cover_lin_and_gates() -> None:
    models = [gradcheck_fixture(s)[0] for s in range(10)]
    assert any(m.lin is not None for m in models)
    assert any(m.lhuc is not None for m in models)
    assert any(m.lin is not None and m.lhuc is not None for m in models)
    assert all(len(m.spec.hidden_dims) <= 3 and max(m.spec.hidden_dims) <= 16 for m in models)


def test_gradcheck_fixture_is_seeded() -> None:
    a, xa, ta = gradcheck_fixture(7)
    b, xb, tb = gradcheck_fixture(7)
    assert a.spec == b.spec
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ta, tb)


def test_gradcheck_detects_wrong_gradient(seeded_model: Model) -> None:
    rng = np.random.default_rng(6)
    batch = rng.normal(size=(4, 5))
    targets = softmax(rng.normal(size=(4, 3)))

    def skewed(model, b, t):
        grads = model_backward(model, b, t)
        weights = list(grads.weights)
        weights[0] = weights[0] * 1.01
        return GradientSet(tuple(weights), grads.biases, grads.lin_weight, grads.lin_bias, grads.gates)

    with patch("adaptlab.oracle.model_backward", side_effect=skewed):
        report = gradcheck(seeded_model, batch, targets)
    assert not report.passed
    assert report.worst[0] == "layer1.weight"
    assert "FAIL" in report.format()


def test_report_format_lists_every_tensor(seeded_model: Model) -> None:
    rng = np.random.default_rng(8)
    report = gradcheck(seeded_model, rng.normal(size=(3, 5)), softmax(rng.normal(size=(3, 3))))
    text = report.format()
    for name in ("layer1.weight", "layer1.bias", "layer3.weight", "layer3.bias"):
        assert name in text
    assert text.splitlines()[-1].startswith("PASS")
