"""Unit tests for LIN / LHUC / KLD adaptation, method catalogue and speaker artifacts."""
import math
from pathlib import Path

import numpy as np
import pytest

from adaptlab.adapt import (
    KLD_LEARNING_RATE,
    LHUC_LEARNING_RATE,
    LIN_LEARNING_RATE,
    METHOD_TOKENS,
    AdaptMethod,
    BlendedTargets,
    KldConfig,
    adapt,
    blend_targets,
    cache_si_posteriors,
    insert_lhuc,
    insert_lin,
    lhuc_gate,
    load_speaker_model,
    parameter_count,
    save_speaker_model,
)
from adaptlab.errors import ArtifactMismatchError, ShapeError
from adaptlab.nn import (
    Dataset,
    Model,
    NetworkParams,
    NetworkSpec,
    TrainSchedule,
    error_rate,
    model_forward,
    params_checksum,
    softmax,
    train,
)
from adaptlab.synthdata import SpeakerProfile, Severity, TaskSpec, apply_speaker, generate_si_corpus
from adaptlab.utils import one_hot

DEFAULT_SPEC = NetworkSpec(20, (64, 64, 64, 64), 10)
QUICK = TrainSchedule(epochs=4, batch_size=8, patience=None, gradient_reduction="sum")


def adapt_run(si, method, data, cv):
    return adapt(si, method, data, cv, seed=9)


@pytest.fixture
def task() -> TaskSpec:
    return TaskSpec(n_classes=3, feature_dim=4, seed=5)


@pytest.fixture
def si(task: TaskSpec) -> Model:
    spec = NetworkSpec(task.feature_dim, (8, 6), task.n_classes)
    return Model(spec, NetworkParams.init(spec, seed=13))


@pytest.fixture
def speaker_data(task: TaskSpec) -> tuple[Dataset, Dataset]:
    train_set, cv_set = generate_si_corpus(task, 48, 24)
    profile = SpeakerProfile("S01", Severity.HEAVY, np.eye(4), np.array([1.0, -0.5, 0.0, 0.7]), 0.1, seed=3)
    return apply_speaker(profile, train_set), apply_speaker(profile, cv_set)


# -- gates and targets -----------------------------------------------------------

def test_lhuc_gate_examples() -> None:
    assert lhuc_gate(np.array([0.0]))[0] == 1.0
    assert lhuc_gate(np.array([math.log(3)]))[0] == pytest.approx(1.5, abs=1e-15)
    assert lhuc_gate(np.array([-math.log(3)]))[0] == pytest.approx(0.5, abs=1e-15)


def test_blend_targets_example() -> None:
    out = blend_targets(np.array([2]), np.array([[0.2, 0.3, 0.5]]), 0.25)
    np.testing.assert_allclose(out, [[0.05, 0.075, 0.875]], atol=1e-15)


def test_blend_targets_endpoints_are_exact() -> None:
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(50, 6)))
    labels = rng.integers(0, 6, size=50)
    np.testing.assert_array_equal(blend_targets(labels, p, 0.0), one_hot(labels, 6))
    np.testing.assert_array_equal(blend_targets(labels, p, 1.0), p)


def test_blend_targets_random_triples() -> None:
    rng = np.random.default_rng(1)
    for rho in rng.uniform(0, 1, size=100):
        p = rng.dirichlet(np.ones(5), size=1000)
        labels = rng.integers(0, 5, size=1000)
        out = blend_targets(labels, p, float(rho))
        hard = one_hot(labels, 5)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= np.minimum(hard, p) - 1e-15)
        assert np.all(out <= np.maximum(hard, p) + 1e-15)


def test_blend_targets_rejects_bad_rho() -> None:
    with pytest.raises(ValueError, match=r"rho must be in \[0, 1\]"):
        blend_targets(np.array([0]), np.array([[1.0, 0.0]]), 1.5)
    with pytest.raises(ValueError):
        blend_targets(np.array([0]), np.array([[1.0, 0.0]]), -0.1)


def test_blend_targets_row_mismatch() -> None:
    with pytest.raises(ShapeError):
        blend_targets(np.array([0, 1]), np.array([[1.0, 0.0]]), 0.5)


def test_cache_si_posteriors(si: Model, speaker_data) -> None:
    data, _ = speaker_data
    cached = cache_si_posteriors(si, data)
    np.testing.assert_array_equal(cached, model_forward(si, data))
    np.testing.assert_allclose(cached[:3].sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        cached[0, 0] = 0.0


def test_blended_targets_checks_dataset(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    fn = BlendedTargets(cache_si_posteriors(si, data), 0.5)
    assert fn(data, np.arange(4)).shape == (4, 3)
    with pytest.raises(ShapeError, match="cached SI posteriors cover"):
        fn(cv, np.arange(4))


# -- insertion ------------------------------------------------------------------

def test_fresh_insertions_are_no_ops(si: Model) -> None:
    x = np.random.default_rng(3).normal(size=(1000, 4))
    ref = model_forward(si, x)
    for adapted in (insert_lin(si), insert_lhuc(si), insert_lhuc(insert_lin(si))):
        np.testing.assert_allclose(model_forward(adapted, x), ref, atol=1e-12, rtol=0)
        assert adapted.params.trainable == (False, False, False)


def test_insert_lin_shape(si: Model) -> None:
    m = insert_lin(si)
    np.testing.assert_array_equal(m.lin.weight, np.eye(4))
    assert not np.any(m.lin.bias)
    with pytest.raises(ValueError, match="already carries a LIN"):
        insert_lin(m)


def test_insert_lhuc_shape(si: Model) -> None:
    m = insert_lhuc(si)
    assert [r.shape for r in m.lhuc.r] == [(8,), (6,)]
    np.testing.assert_array_equal(np.concatenate(m.lhuc.amplitudes()), 1.0)
    with pytest.raises(ValueError, match="already carries LHUC"):
        insert_lhuc(m)


# -- method catalogue -----------------------------------------------------------

def test_method_requires_something() -> None:
    with pytest.raises(ValueError, match="at least one of LIN, LHUC or KLD"):
        AdaptMethod()


def test_rsi_requires_zero_rho() -> None:
    with pytest.raises(ValueError, match="requires rho == 0"):
        KldConfig(0.1, blend=False)


@pytest.mark.parametrize("token", METHOD_TOKENS)
def test_parse_round_trips_names(token: str) -> None:
    assert AdaptMethod.parse(token).name == token


def test_parse_unknown_token() -> None:
    with pytest.raises(ValueError, match="unknown method 'lhn'"):
        AdaptMethod.parse("lhn")


def test_method_semantics() -> None:
    kld = AdaptMethod.parse("kld", rho=0.125)
    assert not kld.freeze_base and kld.rho == 0.125
    rsi = AdaptMethod.parse("rsi")
    assert rsi.is_rsi and rsi.rho == 0.0 and not rsi.freeze_base
    lin_kld = AdaptMethod.parse("lin+kld")
    assert lin_kld.freeze_base and lin_kld.rho == 0.25
    with pytest.raises(ValueError, match="no regularization weight"):
        rsi.with_rho(0.5)
    assert lin_kld.with_rho(0.5).rho == 0.5


def test_default_learning_rates() -> None:
    assert AdaptMethod.parse("lin").learning_rate == LIN_LEARNING_RATE == 1e-5
    assert AdaptMethod.parse("kld").learning_rate == KLD_LEARNING_RATE == 1e-3
    assert AdaptMethod.parse("rsi").learning_rate == KLD_LEARNING_RATE
    assert AdaptMethod.parse("lhuc").learning_rate == LHUC_LEARNING_RATE == 1e-2
    # Combinations take the smallest constituent rate.
    assert AdaptMethod.parse("lhuc+kld").learning_rate == KLD_LEARNING_RATE
    assert AdaptMethod.parse("lin+lhuc+kld").learning_rate == LIN_LEARNING_RATE


def test_group_learning_rates_validation() -> None:
    with pytest.raises(ValueError, match="unknown learning-rate groups"):
        AdaptMethod(use_lhuc=True, group_learning_rates={"gates": 0.1})
    m = AdaptMethod(use_lin=True, use_lhuc=True, learning_rate=0.01, group_learning_rates={"lin": 0.001})
    assert m.training_schedule(seed=3).group_learning_rates == {"base": 0.01, "lin": 0.001, "lhuc": 0.01}
    assert m.training_schedule(seed=3).seed == 3


def test_parameter_counts_for_default_spec() -> None:
    total = DEFAULT_SPEC.parameter_count()
    lhuc = parameter_count(AdaptMethod.parse("lhuc"), DEFAULT_SPEC)
    lin = parameter_count(AdaptMethod.parse("lin"), DEFAULT_SPEC)
    kld = parameter_count(AdaptMethod.parse("kld"), DEFAULT_SPEC)
    assert lhuc.adapted == 256
    assert lin.adapted == 420
    assert kld.adapted == total and kld.total == total
    assert lhuc.adapted < lin.adapted < kld.adapted
    assert parameter_count(AdaptMethod.parse("lin+lhuc+kld"), DEFAULT_SPEC).adapted == 676
    assert lin.total == total + 420


# -- adapt ----------------------------------------------------------------------

def test_rsi_equals_kld_at_zero_rho(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    rsi = adapt_run(si, AdaptMethod.parse("rsi", schedule=QUICK), data, cv)
    kld0 = adapt_run(si, AdaptMethod.parse("kld", rho=0.0, schedule=QUICK), data, cv)
    assert rsi.trace.train_losses == kld0.trace.train_losses
    assert rsi.trace.cv_errors == kld0.trace.cv_errors
    for a, b in zip(rsi.model.params.weights + rsi.model.params.biases,
                    kld0.model.params.weights + kld0.model.params.biases):
        np.testing.assert_array_equal(a, b)


def test_kld_updates_every_layer(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    out = adapt_run(si, AdaptMethod.parse("kld", schedule=QUICK), data, cv)
    assert out.model.params.trainable == (True, True, True)
    for a, b in zip(out.model.params.weights, si.params.weights):
        assert not np.array_equal(a, b)
    # The SI model itself is never touched.
    assert si.params.trainable == (True, True, True)


@pytest.mark.parametrize("token", ["lin", "lhuc", "lin+lhuc", "lin+kld", "lhuc+kld", "lin+lhuc+kld"])
def test_frozen_base_stays_bit_identical(si: Model, speaker_data, token: str) -> None:
    data, cv = speaker_data
    before = params_checksum(si.params)
    out = adapt_run(si, AdaptMethod.parse(token, schedule=QUICK), data, cv)
    assert params_checksum(out.model.params) == before
    for a, b in zip(out.model.params.weights, si.params.weights):
        np.testing.assert_array_equal(a, b)


def test_lin_moves_off_identity(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    one_epoch = TrainSchedule(epochs=1, batch_size=8, patience=None, gradient_reduction="sum")
    out = adapt_run(si, AdaptMethod.parse("lin", schedule=one_epoch), data.subset(np.arange(40)), cv)
    assert not np.array_equal(out.model.lin.weight, np.eye(4))


def test_lhuc_gates_stay_in_range(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    out = adapt_run(si, AdaptMethod.parse("lhuc", schedule=QUICK, learning_rate=0.1), data, cv)
    amps = np.concatenate(out.model.lhuc.amplitudes())
    assert np.all(amps > 0) and np.all(amps < 2)
    assert np.any(amps != 1.0)


def test_cached_posteriors_unchanged_by_adaptation(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    cached = cache_si_posteriors(si, data)
    snapshot = cached.copy()
    adapt_run(si, AdaptMethod.parse("kld", schedule=QUICK), data, cv)
    np.testing.assert_array_equal(cached, snapshot)
    np.testing.assert_array_equal(model_forward(si, data), snapshot)


def test_group_rate_zero_freezes_lin(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    method = AdaptMethod(use_lin=True, use_lhuc=True, learning_rate=0.01, schedule=QUICK,
                         group_learning_rates={"lin": 0.0})
    out = adapt_run(si, method, data, cv)
    np.testing.assert_array_equal(out.model.lin.weight, np.eye(4))
    assert any(np.any(r != 0) for r in out.model.lhuc.r)


def test_adapt_rejects_adapted_input(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    with pytest.raises(ValueError, match="must not carry adaptation layers"):
        adapt_run(insert_lin(si), AdaptMethod.parse("lhuc", schedule=QUICK), data, cv)


def test_trained_tensors_only_speaker_dependent(si: Model, speaker_data) -> None:
    data, cv = speaker_data
    lhuc = adapt_run(si, AdaptMethod.parse("lhuc", schedule=QUICK), data, cv)
    assert sorted(lhuc.trained_tensors()) == ["lhuc.r1", "lhuc.r2"]
    assert lhuc.adapted_parameter_count == 14
    kld = adapt_run(si, AdaptMethod.parse("kld", schedule=QUICK), data, cv)
    assert len(kld.trained_tensors()) == 6


# -- behaviour on a trained SI model --------------------------------------------

@pytest.fixture(scope="module")
def trained_si() -> tuple[TaskSpec, Model]:
    task = TaskSpec(n_classes=4, feature_dim=6, seed=3)
    train_set, cv_set = generate_si_corpus(task, 2000, 400)
    spec = NetworkSpec(6, (16,), 4)
    schedule = TrainSchedule(epochs=20, batch_size=8, learning_rate=0.2, patience=5)
    model, _ = train(Model(spec, NetworkParams.init(spec, seed=0)), train_set, cv_set, schedule)
    return task, model


def test_kld_helps_on_translated_speaker(trained_si) -> None:
    task, si = trained_si
    shift = np.zeros(6)
    shift[:3] = [3.0, -3.0, 2.0]
    profile = SpeakerProfile("S09", Severity.HEAVY, np.eye(6), shift, 0.0, seed=1)
    train_set, test_set = generate_si_corpus(task, 1000, 400)
    adapt_set = apply_speaker(profile, train_set)
    cv = apply_speaker(profile, train_set.subset(np.arange(500, 700)))
    test = apply_speaker(profile, test_set)
    long_run = TrainSchedule(epochs=100, batch_size=8, patience=10, gradient_reduction="sum")
    method = AdaptMethod.parse("kld", rho=0.25, learning_rate=0.01, schedule=long_run)
    out = adapt_run(si, method, adapt_set.subset(np.arange(100)), cv)
    assert error_rate(out.model, test) < error_rate(si, test)


# -- speaker artifacts ----------------------------------------------------------

@pytest.mark.parametrize("token", ["lin", "lhuc", "lin+lhuc+kld", "kld", "rsi"])
def test_speaker_artifact_round_trip(tmp_path: Path, si: Model, speaker_data, token: str) -> None:
    data, cv = speaker_data
    out = adapt_run(si, AdaptMethod.parse(token, schedule=QUICK), data, cv)
    path = tmp_path / f"{token}.adlb"
    save_speaker_model(out, si, path)
    loaded = load_speaker_model(path, si)
    assert loaded.speaker_id == "S01"
    assert loaded.method.name == out.method.name
    assert loaded.method.rho == out.method.rho
    assert loaded.method.learning_rate == out.method.learning_rate
    np.testing.assert_array_equal(model_forward(loaded.model, cv), model_forward(out.model, cv))


def test_speaker_artifact_size_tracks_adapted_parameters(tmp_path: Path, si: Model, speaker_data) -> None:
    data, cv = speaker_data
    sizes = {}
    for token in ("lhuc", "lin", "kld"):
        out = adapt_run(si, AdaptMethod.parse(token, schedule=QUICK), data, cv)
        save_speaker_model(out, si, tmp_path / f"{token}.adlb")
        sizes[token] = (tmp_path / f"{token}.adlb").stat().st_size
    assert sizes["lhuc"] < sizes["lin"] < sizes["kld"]


def test_speaker_artifact_rejects_other_si(tmp_path: Path, si: Model, speaker_data) -> None:
    data, cv = speaker_data
    out = adapt_run(si, AdaptMethod.parse("lhuc", schedule=QUICK), data, cv)
    path = tmp_path / "lhuc.adlb"
    save_speaker_model(out, si, path)
    other = Model(si.spec, NetworkParams.init(si.spec, seed=99))
    with pytest.raises(ArtifactMismatchError, match="different SI model"):
        load_speaker_model(path, other)
