"""
End-to-end trend runs on the shipped config. Slow; the orderings checked here
are pinned by the default seeds rather than guaranteed for every seed.
"""
import dataclasses

import numpy as np
import pytest

from adaptlab.adapt import adapt
from adaptlab.config import Config
from adaptlab.harness import (
    Cell,
    ExperimentConfig,
    build_cells,
    cell_seed,
    run_sweep,
    speaker_splits,
    train_baseline,
    trend_checks,
)
from adaptlab.nn import TrainSchedule, cross_entropy, error_rate, model_forward

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def shipped() -> ExperimentConfig:
    return ExperimentConfig.from_config(Config.load())


@pytest.fixture(scope="module")
def baseline_run(shipped):
    return train_baseline(shipped)


def test_si_model_learns_the_task(baseline_run) -> None:
    _, baseline = baseline_run
    assert baseline.si_test_error <= 0.05


def test_baseline_severity_order(shipped, baseline_run) -> None:
    _, baseline = baseline_run
    assert len(baseline.rows) == 10
    means = baseline.group_means()
    assert means["medium"] - means["slight"] >= 0.02
    assert means["heavy"] - means["medium"] >= 0.02


@pytest.fixture(scope="module")
def large_size_sweep(shipped, baseline_run):
    si, _ = baseline_run
    exp = ExperimentConfig.from_config(
        Config.load(), methods=["lin", "lhuc", "rsi", "kld", "lin+lhuc"], sizes=[100, 300]
    )
    return exp, run_sweep(exp, si)


@pytest.fixture(scope="module")
def combination_sweep(shipped, baseline_run):
    si, _ = baseline_run
    exp = ExperimentConfig.from_config(
        Config.load(), methods=["lin+kld", "lhuc+kld", "lin+lhuc+kld"], sizes=[100], rho_grid=[0.25]
    )
    return exp, run_sweep(exp, si)


def test_frozen_methods_leave_si_intact(large_size_sweep) -> None:
    exp, result = large_size_sweep
    assert len(result) == len(build_cells(exp))
    assert not result.failed()
    for r in result.records:
        if r.method in ("kld", "rsi"):
            assert r.base_intact is None
        else:
            assert r.base_intact is True


def test_combinations_freeze_base_and_improve_on_baseline(combination_sweep, baseline_run) -> None:
    _, baseline = baseline_run
    exp, result = combination_sweep
    assert len(result) == len(build_cells(exp)) == 30
    assert not result.failed()
    assert all(r.base_intact is True for r in result.records)
    heavy = baseline.group_means()["heavy"]
    for method in ("lin+kld", "lhuc+kld", "lin+lhuc+kld"):
        errors = [r.test_error for r in result.records if r.method == method and r.severity == "heavy"]
        assert sum(errors) / len(errors) < heavy, method


def test_adaptation_helps_and_heavy_ordering(large_size_sweep, baseline_run) -> None:
    _, baseline = baseline_run
    _, result = large_size_sweep
    checks = {c.name: c for c in trend_checks(result, baseline)}
    assert checks["adaptation_helps_at_300"].passed, checks["adaptation_helps_at_300"].detail
    assert checks["heavy_kld_lhuc_lin_order"].passed, checks["heavy_kld_lhuc_lin_order"].detail


def _label_loss(model, data) -> float:
    """Cross-entropy against the hard labels, the quantity RSI minimises."""
    return cross_entropy(model_forward(model, data), np.eye(model.spec.output_dim)[data.labels])


def test_kld_resists_overfitting_where_rsi_does_not(shipped, baseline_run) -> None:
    # 500 epochs, no early stopping. Both methods drive the frame error on a
    # few blocks to zero, so the training-fit comparison uses the label loss.
    si, _ = baseline_run
    long_schedule = TrainSchedule(epochs=500, batch_size=8, patience=None, gradient_reduction="sum")
    exp = dataclasses.replace(shipped, adapt_schedule=long_schedule)
    splits = speaker_splits(exp)
    seen = []
    for profile in exp.roster:
        s = splits[profile.speaker_id]
        for size in range(1, 11):
            data = s.subset(size)
            seed = cell_seed(exp, Cell(profile.speaker_id, "rsi", size))
            rsi = adapt(si, exp.method("rsi"), data, s.cv, seed=seed).model
            kld = adapt(si, exp.method("kld", rho=0.25), data, s.cv, seed=seed).model
            gap = error_rate(rsi, s.test) - error_rate(kld, s.test)
            fits_better = (
                error_rate(rsi, data) <= error_rate(kld, data)
                and _label_loss(rsi, data) < _label_loss(kld, data)
            )
            seen.append((profile.speaker_id, size, round(gap * s.test.n), fits_better))
            # More than one test frame apart.
            if fits_better and round(gap * s.test.n) >= 2:
                return
    pytest.fail(f"no cell where RSI fits better but tests worse: {seen}")
