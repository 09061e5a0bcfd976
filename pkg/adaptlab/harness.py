"""
Experiment orchestration: SI baseline, the speaker x method x size x rho sweep,
per-severity aggregation, CSV and plot-data output.

Every sweep cell is a pure function of (SI model, speaker splits, method,
size, rho, seed), so cells run in any order or in parallel and a resumed sweep
reproduces an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from adaptlab.adapt import DEFAULT_ADAPT_SCHEDULE, AdaptMethod, adapt, parameter_count
from adaptlab.checkpoint import load_params, save_params
from adaptlab.config import Config
from adaptlab.errors import DivergenceError
from adaptlab.nn import (
    Model,
    NetworkParams,
    NetworkSpec,
    TrainSchedule,
    error_rate,
    params_checksum,
    train,
)
from adaptlab.synthdata import (
    SEVERITY_ORDER,
    DistortionScales,
    Severity,
    SpeakerProfile,
    SpeakerSplits,
    SplitSizes,
    TaskSpec,
    generate_si_corpus,
    make_speakers,
    split_speaker,
)
from adaptlab.utils import derive_seed, sanitize_log_message

logger = logging.getLogger(__name__)

SI_CHECKPOINT = "si.adlb"
BASELINE_CSV = "baseline.csv"
JOURNAL = "cells.jsonl"
RESULTS_CSV = "results.csv"
GROUPS_CSV = "groups.csv"
PARAMS_CSV = "params.csv"
PLOTS_DIR = "plots"
# Fresh pools started after a worker crash before the remaining cells are
# recorded as failed.
POOL_RESTARTS = 2

RESULT_COLUMNS = (
    "speaker_id", "severity", "method", "adaptation_size", "rho",
    "test_error", "cv_error", "train_error", "adapted_param_count",
    "base_intact", "status", "reason",
)
PLOT_COLUMNS = ("series", "adaptation_size", "mean_error")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    task: TaskSpec
    roster: tuple[SpeakerProfile, ...]
    splits: SplitSizes
    network: NetworkSpec
    si_schedule: TrainSchedule
    n_si_train: int
    n_si_cv: int
    n_si_test: int
    methods: tuple[AdaptMethod, ...]
    sizes: tuple[int, ...]
    rho_grid: tuple[float, ...]
    seed: int = 0
    jobs: int = 1
    rho_selection: str = "global"
    adapt_schedule: TrainSchedule = DEFAULT_ADAPT_SCHEDULE
    learning_rates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k in self.sizes:
            if not 1 <= k <= self.splits.adapt_pool:
                raise ValueError(f"adaptation size {k} outside [1, {self.splits.adapt_pool}]")
        for rho in self.rho_grid:
            if not 0.0 <= rho <= 1.0:
                raise ValueError(f"rho must be in [0, 1], got {rho!r}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs!r}")

    @classmethod
    def from_config(
        cls,
        config: Config,
        seed: int | None = None,
        methods: Sequence[str] | None = None,
        sizes: Sequence[int] | None = None,
        rho_grid: Sequence[float] | None = None,
        jobs: int | None = None,
    ) -> ExperimentConfig:
        """Resolve config sections into concrete task, roster, network and methods.
        `seed` overrides every seed in the file (task, roster, SI training, sweep)."""
        t, r = config.task, config.roster
        task = TaskSpec(
            n_classes=t.n_classes,
            feature_dim=t.feature_dim,
            seed=t.seed if seed is None else seed,
            class_sep=t.class_sep,
            within_std=t.within_std,
            block_size=t.block_size,
        )
        roster = make_speakers(
            task,
            n_per_severity={Severity(k): v for k, v in r.counts.items()},
            seed=r.seed if seed is None else seed,
            ranges={Severity(k): v for k, v in r.ranges.items()},
            scales=DistortionScales(r.matrix_scale, r.shift_scale, r.noise_scale),
        )
        network = NetworkSpec(
            input_dim=t.feature_dim,
            hidden_dims=tuple(config.network.hidden_dims),
            output_dim=t.n_classes,
            hidden_activation=config.network.activation,
        )
        s = config.si_training
        si_schedule = TrainSchedule(
            epochs=s.epochs,
            batch_size=s.batch_size,
            learning_rate=s.learning_rate,
            seed=s.seed if seed is None else seed,
            patience=s.patience,
        )
        a = config.adaptation
        adapt_schedule = TrainSchedule(
            epochs=a.epochs,
            batch_size=a.batch_size,
            patience=a.patience,
            gradient_reduction=a.gradient_reduction,
        )
        tokens = tuple(m.strip().lower() for m in methods) if methods is not None else config.sweep.methods
        parsed = tuple(
            AdaptMethod.parse(tok, schedule=adapt_schedule, learning_rate=a.learning_rates.get(tok))
            for tok in tokens
        )
        if len({m.name for m in parsed}) != len(parsed):
            raise ValueError(f"duplicate methods in {list(tokens)}")
        return cls(
            task=task,
            roster=tuple(roster),
            splits=SplitSizes(r.adapt_pool, r.cv, r.test),
            network=network,
            si_schedule=si_schedule,
            n_si_train=s.n_train,
            n_si_cv=s.n_cv,
            n_si_test=s.n_test,
            methods=parsed,
            sizes=tuple(sizes) if sizes is not None else config.sweep.sizes,
            rho_grid=tuple(rho_grid) if rho_grid is not None else config.sweep.rho_grid,
            seed=config.sweep.seed if seed is None else seed,
            jobs=jobs if jobs is not None else config.sweep.jobs,
            rho_selection=config.sweep.rho_selection,
            adapt_schedule=adapt_schedule,
            learning_rates=dict(a.learning_rates),
        )

    def speaker(self, speaker_id: str) -> SpeakerProfile:
        for p in self.roster:
            if p.speaker_id == speaker_id:
                return p
        raise KeyError(f"no speaker {speaker_id!r} in roster")

    def method(self, token: str, rho: float | None = None) -> AdaptMethod:
        """A method with this experiment's schedule and learning-rate overrides."""
        token = token.strip().lower()
        return AdaptMethod.parse(token, rho=rho, schedule=self.adapt_schedule,
                                 learning_rate=self.learning_rates.get(token))


@dataclass(frozen=True)
class Cell:
    speaker_id: str
    method: str
    size: int
    rho: float | None = None

    @property
    def key(self) -> str:
        return f"{self.speaker_id}|{self.method}|{self.size}|{'-' if self.rho is None else repr(self.rho)}"


@dataclass
class ExperimentRecord:
    speaker_id: str
    severity: str
    method: str
    adaptation_size: int
    rho: float | None
    test_error: float | None
    cv_error: float | None
    train_error: float | None
    adapted_param_count: int
    base_intact: bool | None = None
    status: str = "ok"
    reason: str = ""
    wall_time: float = 0.0

    @property
    def key(self) -> str:
        return Cell(self.speaker_id, self.method, self.adaptation_size, self.rho).key

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ExperimentResult:
    records: list[ExperimentRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def successful(self) -> list[ExperimentRecord]:
        return [r for r in self.records if r.ok]

    def failed(self) -> list[ExperimentRecord]:
        return [r for r in self.records if not r.ok]


@dataclass(frozen=True)
class BaselineRow:
    speaker_id: str
    severity: str
    magnitude: float
    distortion: float
    test_error: float


@dataclass
class Baseline:
    si_test_error: float
    rows: list[BaselineRow]

    def group_means(self) -> dict[str, float]:
        groups: dict[str, list[float]] = defaultdict(list)
        for row in self.rows:
            groups[row.severity].append(row.test_error)
        return {sev.value: float(np.mean(groups[sev.value])) for sev in SEVERITY_ORDER if groups[sev.value]}


def _uses_rho(method: AdaptMethod) -> bool:
    return method.kld is not None and method.kld.blend


def build_cells(config: ExperimentConfig) -> list[Cell]:
    """Every (speaker, method, size[, rho]) cell in output order."""
    cells = []
    for profile in config.roster:
        for method in config.methods:
            rhos: Iterable[float | None] = config.rho_grid if _uses_rho(method) else (None,)
            for size in config.sizes:
                for rho in rhos:
                    cells.append(Cell(profile.speaker_id, method.name, size, rho))
    return cells


def cell_seed(config: ExperimentConfig, cell: Cell) -> int:
    # Independent of method and rho so that methods are compared on the same
    # minibatch order (and RSI lines up with KLD at rho = 0).
    return derive_seed(config.seed, "cell", cell.speaker_id, cell.size)


def speaker_splits(config: ExperimentConfig) -> dict[str, SpeakerSplits]:
    return {p.speaker_id: split_speaker(p, config.task, config.splits) for p in config.roster}


def train_baseline(config: ExperimentConfig) -> tuple[Model, Baseline]:
    """Train the SI model on SI-distribution data only and score every roster speaker."""
    train_data, test_data = generate_si_corpus(
        config.task, config.n_si_train + config.n_si_cv, config.n_si_test
    )
    si_train = train_data.subset(np.arange(config.n_si_train))
    si_cv = train_data.subset(np.arange(config.n_si_train, config.n_si_train + config.n_si_cv))
    params = NetworkParams.init(config.network, seed=derive_seed(config.si_schedule.seed, "init"))
    logger.info(
        "Training SI model %s on %d samples (%d epochs max)",
        config.network.hidden_dims, si_train.n, config.si_schedule.epochs,
    )
    try:
        si, trace = train(Model(config.network, params), si_train, si_cv, config.si_schedule)
    except DivergenceError as e:
        raise DivergenceError(f"SI training diverged: {e}") from e
    for rec in trace.epochs:
        logger.info(
            "SI epoch %d: train_loss=%.4f train_err=%.4f cv_err=%.4f",
            rec.epoch, rec.train_loss, rec.train_error, rec.cv_error,
        )
    return si, score_baseline(config, si, test_data)


def score_baseline(config: ExperimentConfig, si: Model, si_test=None) -> Baseline:
    if si_test is None:
        _, si_test = generate_si_corpus(config.task, config.n_si_train + config.n_si_cv, config.n_si_test)
    splits = speaker_splits(config)
    rows = [
        BaselineRow(
            speaker_id=p.speaker_id,
            severity=p.severity.value,
            magnitude=p.magnitude,
            distortion=p.distortion,
            test_error=error_rate(si, splits[p.speaker_id].test),
        )
        for p in config.roster
    ]
    baseline = Baseline(si_test_error=error_rate(si, si_test), rows=rows)
    logger.info("SI held-out error %.4f", baseline.si_test_error)
    return baseline


def load_or_train_si(config: ExperimentConfig, out_dir: Path | None) -> tuple[Model, Baseline]:
    """Reuse out_dir/si.adlb when it matches the configured network; train otherwise."""
    path = out_dir / SI_CHECKPOINT if out_dir is not None else None
    if path is not None and path.exists():
        spec, params = load_params(path)
        if spec == config.network:
            logger.info("Loaded SI model from %s", sanitize_log_message(path))
            si = Model(spec, params)
            return si, score_baseline(config, si)
        logger.warning("SI checkpoint %s does not match the configured network; retraining",
                       sanitize_log_message(path))
    si, baseline = train_baseline(config)
    if out_dir is not None:
        save_si(si, baseline, out_dir)
    return si, baseline


def save_si(si: Model, baseline: Baseline, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(si.spec, si.params, out_dir / SI_CHECKPOINT)
    emit_baseline_csv(baseline, out_dir / BASELINE_CSV)


def run_cell(
    si: Model,
    splits: SpeakerSplits,
    method: AdaptMethod,
    cell: Cell,
    seed: int,
) -> ExperimentRecord:
    """Adapt on the nested subset, early-stop on CV, score on test. Never raises."""
    started = time.perf_counter()
    profile = splits.profile
    record = ExperimentRecord(
        speaker_id=cell.speaker_id,
        severity=profile.severity.value,
        method=cell.method,
        adaptation_size=cell.size,
        rho=cell.rho,
        test_error=None,
        cv_error=None,
        train_error=None,
        adapted_param_count=parameter_count(method, si.spec).adapted,
    )
    try:
        if cell.rho is not None:
            method = method.with_rho(cell.rho)
        data = splits.subset(cell.size)
        speaker = adapt(si, method, data, splits.cv, seed=seed)
        if method.freeze_base:
            record.base_intact = params_checksum(speaker.model.params) == params_checksum(si.params)
            if not record.base_intact:
                raise RuntimeError("SI tensors changed during a frozen-base adaptation")
        record.test_error = error_rate(speaker.model, splits.test)
        record.cv_error = error_rate(speaker.model, splits.cv)
        record.train_error = error_rate(speaker.model, data)
    except Exception as e:
        logger.exception("Cell %s failed", sanitize_log_message(cell.key))
        record.status = "failed"
        record.reason = sanitize_log_message(f"{type(e).__name__}: {e}")
    record.wall_time = time.perf_counter() - started
    return record


def _record_to_json(record: ExperimentRecord) -> str:
    return json.dumps(dataclasses.asdict(record), sort_keys=True)


def _record_from_dict(d: dict) -> ExperimentRecord:
    names = {f.name for f in dataclasses.fields(ExperimentRecord)}
    return ExperimentRecord(**{k: v for k, v in d.items() if k in names})


def read_journal(path: Path) -> dict[str, ExperimentRecord]:
    done: dict[str, ExperimentRecord] = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = _record_from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError, AttributeError) as e:
                # A torn final line from an interrupted run is expected.
                logger.warning("Skipping unreadable journal line %d: %s", lineno, sanitize_log_message(e))
                continue
            done[record.key] = record
    return done


def run_sweep(
    config: ExperimentConfig,
    si: Model,
    out_dir: Path | None = None,
    resume: bool = False,
    max_cells: int | None = None,
) -> ExperimentResult:
    """
    Run every configured cell. With an out_dir, finished cells are appended to
    cells.jsonl as they complete and `resume` skips cells already journalled,
    except pool failures, which run again. `max_cells` stops after that many
    new cells (used to simulate interruption).
    """
    cells = build_cells(config)
    wanted = {c.key for c in cells}
    done: dict[str, ExperimentRecord] = {}
    journal = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        journal = out_dir / JOURNAL
        if resume and journal.exists():
            done = {
                k: v for k, v in read_journal(journal).items()
                if k in wanted and not is_pool_failure(v)
            }
            logger.info("Resuming: %d of %d cells already done", len(done), len(cells))
        elif journal.exists():
            journal.unlink()

    pending = [c for c in cells if c.key not in done]
    if max_cells is not None:
        pending = pending[:max_cells]
    splits = speaker_splits(config)
    methods = {m.name: m for m in config.methods}
    logger.info("Running %d cells with %d job(s)", len(pending), config.jobs)

    jf = open(journal, "a") if journal is not None else None
    try:
        def collect(record: ExperimentRecord) -> None:
            done[record.key] = record
            if jf is not None:
                jf.write(_record_to_json(record) + "\n")
                jf.flush()
            if record.ok:
                logger.info("Cell %s: test_err=%.4f (%.1fs)", sanitize_log_message(record.key),
                            record.test_error, record.wall_time)
            else:
                logger.warning("Cell %s failed: %s", sanitize_log_message(record.key), record.reason)

        if config.jobs == 1:
            for c in pending:
                collect(run_cell(si, splits[c.speaker_id], methods[c.method], c, cell_seed(config, c)))
        else:
            _run_pooled(config, si, pending, splits, methods, collect)
    finally:
        if jf is not None:
            jf.close()

    return ExperimentResult([done[c.key] for c in cells if c.key in done])


def _failed_record(
    config: ExperimentConfig, si: Model, method: AdaptMethod, cell: Cell, error: BaseException
) -> ExperimentRecord:
    return ExperimentRecord(
        speaker_id=cell.speaker_id, severity=config.speaker(cell.speaker_id).severity.value,
        method=cell.method, adaptation_size=cell.size, rho=cell.rho,
        test_error=None, cv_error=None, train_error=None,
        adapted_param_count=parameter_count(method, si.spec).adapted,
        status="failed", reason=sanitize_log_message(f"{type(error).__name__}: {error}"),
    )


def is_pool_failure(record: ExperimentRecord) -> bool:
    """A cell that never ran because its worker pool broke, not because adaptation failed."""
    return not record.ok and (record.reason or "").startswith(BrokenProcessPool.__name__)


def _run_pooled(
    config: ExperimentConfig,
    si: Model,
    pending: list[Cell],
    splits: dict[str, SpeakerSplits],
    methods: dict[str, AdaptMethod],
    collect,
) -> None:
    """
    Fan cells out over worker processes. A dead worker breaks the whole pool
    and fails every future still in it; those cells go to a fresh pool, up to
    POOL_RESTARTS times, before they are recorded as pool failures.
    """
    remaining = list(pending)
    for attempt in range(POOL_RESTARTS + 1):
        broken: BrokenProcessPool | None = None
        unfinished: set[str] = set()
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = {
                pool.submit(run_cell, si, splits[c.speaker_id], methods[c.method], c,
                            cell_seed(config, c)): c
                for c in remaining
            }
            for fut in as_completed(futures):
                c = futures[fut]
                try:
                    record = fut.result()
                except BrokenProcessPool as e:
                    broken = e
                    unfinished.add(c.key)
                    continue
                except Exception as e:
                    # The result failed to pickle or unpickle.
                    record = _failed_record(config, si, methods[c.method], c, e)
                collect(record)
        if broken is None:
            return
        remaining = [c for c in remaining if c.key in unfinished]
        if attempt < POOL_RESTARTS:
            logger.warning("Worker pool broke (%s); resubmitting %d cell(s) to a fresh pool",
                           sanitize_log_message(broken), len(remaining))
    for c in remaining:
        collect(_failed_record(config, si, methods[c.method], c, broken))


# -- aggregation -----------------------------------------------------------------

def select_best_rho(result: ExperimentResult, mode: str = "global") -> ExperimentResult:
    """
    Keep one rho per KLD-bearing (method, size): the one with the lowest mean CV
    error over all speakers ("global") or per speaker ("per_speaker"). Ties go
    to the smaller rho. Records without rho pass through.
    """
    if mode not in ("global", "per_speaker"):
        raise ValueError(f"rho selection must be 'global' or 'per_speaker', got {mode!r}")
    ok = result.successful()
    cv: dict[tuple, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in ok:
        if r.rho is None:
            continue
        group = (r.method, r.adaptation_size) + ((r.speaker_id,) if mode == "per_speaker" else ())
        cv[group][r.rho].append(r.cv_error)
    best = {
        group: min(by_rho, key=lambda rho: (float(np.mean(by_rho[rho])), rho))
        for group, by_rho in cv.items()
    }
    kept = []
    for r in ok:
        if r.rho is None:
            kept.append(r)
            continue
        group = (r.method, r.adaptation_size) + ((r.speaker_id,) if mode == "per_speaker" else ())
        if best[group] == r.rho:
            kept.append(r)
    return ExperimentResult(kept)


@dataclass(frozen=True)
class GroupRow:
    severity: str
    method: str
    adaptation_size: int
    rho: float | None
    n_speakers: int
    mean_error: float
    min_error: float
    max_error: float
    adapted_param_count: int


def group_report(result: ExperimentResult, baseline: Baseline | None = None) -> list[GroupRow]:
    """Mean / min / max test error per (severity, method, size, rho)."""
    ok = result.successful()
    if not ok and baseline is None:
        raise ValueError("group_report needs at least one successful record")
    groups: dict[tuple, list[ExperimentRecord]] = defaultdict(list)
    method_order: dict[str, int] = {}
    for r in ok:
        method_order.setdefault(r.method, len(method_order))
        groups[(r.severity, r.method, r.adaptation_size, r.rho)].append(r)

    sev_rank = {s.value: i for i, s in enumerate(SEVERITY_ORDER)}
    rows = []
    if baseline is not None:
        by_sev: dict[str, list[float]] = defaultdict(list)
        for b in baseline.rows:
            by_sev[b.severity].append(b.test_error)
        for sev in sorted(by_sev, key=lambda s: sev_rank.get(s, 99)):
            errs = by_sev[sev]
            rows.append(GroupRow(sev, "si", 0, None, len(errs), float(np.mean(errs)),
                                 float(min(errs)), float(max(errs)), 0))
    for key in sorted(groups, key=lambda k: (sev_rank.get(k[0], 99), method_order[k[1]], k[2],
                                              -1.0 if k[3] is None else k[3])):
        recs = groups[key]
        errs = [r.test_error for r in recs]
        rows.append(GroupRow(
            severity=key[0], method=key[1], adaptation_size=key[2], rho=key[3],
            n_speakers=len(recs), mean_error=float(np.mean(errs)),
            min_error=float(min(errs)), max_error=float(max(errs)),
            adapted_param_count=recs[0].adapted_param_count,
        ))
    return rows


def parameter_report(methods: Sequence[AdaptMethod], spec: NetworkSpec) -> list[tuple[str, int, int]]:
    """(method, adapted, total) per method, in the given order."""
    rows = []
    for m in methods:
        count = parameter_count(m, spec)
        rows.append((m.name, count.adapted, count.total))
    return rows


@dataclass(frozen=True)
class TrendCheck:
    name: str
    passed: bool
    detail: str


def _mean_errors(records: Iterable[ExperimentRecord]) -> dict[tuple[str, str, int], float]:
    acc: dict[tuple[str, str, int], list[float]] = defaultdict(list)
    for r in records:
        acc[(r.severity, r.method, r.adaptation_size)].append(r.test_error)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def trend_checks(
    result: ExperimentResult,
    baseline: Baseline,
    rho_selection: str = "global",
    min_gap: float = 0.02,
) -> list[TrendCheck]:
    """Qualitative orderings the synthetic task is expected to reproduce."""
    checks = []
    means = baseline.group_means()
    order = [s.value for s in SEVERITY_ORDER if s.value in means]
    gaps_ok = all(means[b] - means[a] >= min_gap for a, b in zip(order, order[1:]))
    checks.append(TrendCheck(
        "baseline_severity_order", len(order) == 3 and gaps_ok,
        ", ".join(f"{s}={means[s]:.4f}" for s in order),
    ))

    best = _mean_errors(select_best_rho(result, rho_selection).successful())
    sizes = sorted({k[2] for k in best})
    if sizes:
        largest = sizes[-1]
        failures = [
            f"{sev}/{method}: {err:.4f} > {means[sev]:.4f}"
            for (sev, method, size), err in sorted(best.items())
            if size == largest and sev in ("medium", "heavy") and sev in means and err > means[sev]
        ]
        checks.append(TrendCheck(
            f"adaptation_helps_at_{largest}", not failures, "; ".join(failures) or "all methods <= baseline",
        ))

    heavy_sizes = [k for k in sizes if k >= 100]
    if heavy_sizes and all(("heavy", m, s) in best for m in ("kld", "lhuc", "lin") for s in heavy_sizes):
        bad = [
            f"size {s}: kld={best[('heavy', 'kld', s)]:.4f} lhuc={best[('heavy', 'lhuc', s)]:.4f} "
            f"lin={best[('heavy', 'lin', s)]:.4f}"
            for s in heavy_sizes
            if not best[("heavy", "kld", s)] < best[("heavy", "lhuc", s)] < best[("heavy", "lin", s)]
        ]
        checks.append(TrendCheck("heavy_kld_lhuc_lin_order", not bad, "; ".join(bad) or "holds"))
    return checks


# -- output files ----------------------------------------------------------------

def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _open_for_write(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def emit_csv(result: ExperimentResult, path: str | Path, include_timing: bool = False) -> None:
    """
    Columns (in order): speaker_id, severity, method, adaptation_size, rho,
    test_error, cv_error, train_error, adapted_param_count, base_intact, status,
    reason[, wall_time]. Empty cells stand for "not applicable".
    """
    path = Path(path)
    columns = RESULT_COLUMNS + (("wall_time",) if include_timing else ())
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for r in result.records:
            writer.writerow([_fmt(getattr(r, c)) for c in columns])
    logger.info("Wrote %d records to %s", len(result.records), sanitize_log_message(path))


def _opt_float(s: str) -> float | None:
    return float(s) if s != "" else None


def read_csv(path: str | Path) -> ExperimentResult:
    records = []
    with open(path, "r", newline="") as f:
        for row in csv.DictReader(f):
            records.append(ExperimentRecord(
                speaker_id=row["speaker_id"],
                severity=row["severity"],
                method=row["method"],
                adaptation_size=int(row["adaptation_size"]),
                rho=_opt_float(row["rho"]),
                test_error=_opt_float(row["test_error"]),
                cv_error=_opt_float(row["cv_error"]),
                train_error=_opt_float(row["train_error"]),
                adapted_param_count=int(row["adapted_param_count"]),
                base_intact=None if row["base_intact"] == "" else row["base_intact"] == "true",
                status=row["status"],
                reason=row["reason"],
                wall_time=float(row.get("wall_time") or 0.0),
            ))
    return ExperimentResult(records)


def emit_baseline_csv(baseline: Baseline, path: str | Path) -> None:
    path = Path(path)
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["speaker_id", "severity", "magnitude", "distortion", "test_error"])
        for b in baseline.rows:
            writer.writerow([b.speaker_id, b.severity, repr(b.magnitude), repr(b.distortion), repr(b.test_error)])
        writer.writerow(["si", "", "", "", repr(baseline.si_test_error)])


def read_baseline_csv(path: str | Path) -> Baseline:
    rows, si_error = [], float("nan")
    with open(path, "r", newline="") as f:
        for row in csv.DictReader(f):
            if row["speaker_id"] == "si" and not row["severity"]:
                si_error = float(row["test_error"])
                continue
            rows.append(BaselineRow(row["speaker_id"], row["severity"], float(row["magnitude"]),
                                    float(row["distortion"]), float(row["test_error"])))
    return Baseline(si_error, rows)


def emit_group_csv(rows: Sequence[GroupRow], path: str | Path) -> None:
    path = Path(path)
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        columns = [fl.name for fl in dataclasses.fields(GroupRow)]
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(getattr(row, c)) for c in columns])


def emit_params_csv(rows: Sequence[tuple[str, int, int]], path: str | Path) -> None:
    path = Path(path)
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "adapted", "total"])
        writer.writerows(rows)


def _write_series(path: Path, series: dict[str, dict[int, float]]) -> None:
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for name, points in series.items():
            for size in sorted(points):
                writer.writerow([name, size, repr(points[size])])


def _series(records: Iterable[ExperimentRecord], key) -> dict[str, dict[int, float]]:
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        acc[key(r)][r.adaptation_size].append(r.test_error)
    return {name: {k: float(np.mean(v)) for k, v in pts.items()} for name, pts in acc.items()}


def emit_plotdata(
    result: ExperimentResult,
    out_dir: str | Path,
    baseline: Baseline | None = None,
    rho_selection: str = "global",
) -> dict[str, Path]:
    """
    Long-format CSV series (series, adaptation_size, mean_error) per figure:
    summary (one series per method, best rho), kld_rho (one per rho),
    kld_speakers (one per speaker, best rho), combinations, and
    accent_{slight,medium,heavy}. A figure with no data is a header-only file.
    """
    out_dir = Path(out_dir)
    best = select_best_rho(result, rho_selection).successful()
    ok = result.successful()
    files: dict[str, dict[str, dict[int, float]]] = {}

    files["summary"] = _series(best, lambda r: r.method)
    kld_rho = _series((r for r in ok if r.method == "kld"), lambda r: f"rho={r.rho!r}")
    if baseline is not None and kld_rho:
        mean = float(np.mean([b.test_error for b in baseline.rows]))
        sizes = sorted({s for pts in kld_rho.values() for s in pts})
        kld_rho["baseline"] = {s: mean for s in sizes}
    files["kld_rho"] = kld_rho
    files["kld_speakers"] = _series((r for r in best if r.method == "kld"), lambda r: r.speaker_id)
    files["combinations"] = _series(
        (r for r in best if "+" in r.method or r.method in ("lin", "lhuc", "kld")), lambda r: r.method
    )
    for sev in SEVERITY_ORDER:
        files[f"accent_{sev.value}"] = _series((r for r in best if r.severity == sev.value), lambda r: r.method)

    paths = {}
    for name, series in files.items():
        path = out_dir / f"{name}.csv"
        _write_series(path, series)
        paths[name] = path
    logger.info("Wrote %d plot-data files to %s", len(paths), sanitize_log_message(out_dir))
    return paths


def write_reports(
    config: ExperimentConfig,
    result: ExperimentResult,
    baseline: Baseline,
    out_dir: Path,
) -> list[TrendCheck]:
    emit_csv(result, out_dir / RESULTS_CSV)
    if result.successful():
        emit_group_csv(group_report(result, baseline), out_dir / GROUPS_CSV)
    emit_params_csv(parameter_report(config.methods, config.network), out_dir / PARAMS_CSV)
    emit_plotdata(result, out_dir / PLOTS_DIR, baseline, config.rho_selection)
    return trend_checks(result, baseline, config.rho_selection)
