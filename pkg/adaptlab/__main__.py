"""
adaptlab entry point. Run with: python -m adaptlab <command>
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from adaptlab.adapt import adapt, save_speaker_model
from adaptlab.config import Config, resolve_out_dir
from adaptlab.errors import CheckpointError, DivergenceError, InsufficientDataError
from adaptlab.harness import (
    BASELINE_CSV,
    GROUPS_CSV,
    JOURNAL,
    PLOTS_DIR,
    RESULTS_CSV,
    Baseline,
    ExperimentConfig,
    ExperimentResult,
    emit_group_csv,
    emit_plotdata,
    group_report,
    load_or_train_si,
    read_baseline_csv,
    read_csv,
    read_journal,
    build_cells,
    run_sweep,
    save_si,
    train_baseline,
    trend_checks,
    write_reports,
)
from adaptlab.nn import error_rate
from adaptlab.oracle import gradcheck, gradcheck_fixture
from adaptlab.synthdata import SEVERITY_ORDER, export_csv, save_dataset, split_speaker
from adaptlab.utils import sanitize_log_message

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("adaptlab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad arguments or config; exits with EXIT_USAGE."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(value: str) -> list:
        try:
            items = [kind(v.strip()) for v in value.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {value!r}")
        if not items:
            raise argparse.ArgumentTypeError("list must not be empty")
        return items
    return parse


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="Path to config.yaml")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Override every seed")
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS, help="Output directory")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="adaptlab", description="Speaker adaptation lab", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train-si", parents=[common], help="Train the SI model and score the roster")

    roster = sub.add_parser("roster", parents=[common], help="Show the speaker roster")
    roster.add_argument("--export", action="store_true", help="Write every speaker's splits to out_dir/data")

    one = sub.add_parser("adapt", parents=[common], help="Adapt to one speaker")
    one.add_argument("--speaker", required=True)
    one.add_argument("--method", required=True)
    one.add_argument("--size", type=int, default=None, help="Adaptation blocks (default: whole pool)")
    one.add_argument("--rho", type=float, default=None)

    sweep = sub.add_parser("sweep", parents=[common], help="Run the full experiment grid")
    sweep.add_argument("--resume", action="store_true", help="Skip cells already in the journal")
    sweep.add_argument("--jobs", type=int, default=None)
    sweep.add_argument("--methods", type=_csv_list(str), default=None)
    sweep.add_argument("--rho", type=_csv_list(float), default=None)
    sweep.add_argument("--sizes", type=_csv_list(int), default=None)

    sub.add_parser("report", parents=[common], help="Rebuild reports from a finished sweep")

    check = sub.add_parser("gradcheck", parents=[common], help="Check backprop against finite differences")
    check.add_argument("--tol", type=float, default=1e-5)
    check.add_argument("--fixtures", type=int, default=10)
    check.add_argument("--order", type=int, choices=(2, 4), default=2,
                       help="Central-difference stencil order")
    return parser


def _load(args: argparse.Namespace, **overrides) -> tuple[Config, ExperimentConfig, Path]:
    try:
        config = Config.load(args.config)
        exp = ExperimentConfig.from_config(config, seed=args.seed, **overrides)
    except (OSError, ValueError, yaml.YAMLError) as e:
        raise UsageError(f"invalid config: {e}") from e
    return config, exp, resolve_out_dir(args.out_dir, config)


def _print_baseline(baseline: Baseline) -> None:
    print(f"{'speaker':<8} {'severity':<8} {'magnitude':>9} {'distortion':>10} {'error':>7}")
    for row in baseline.rows:
        print(f"{row.speaker_id:<8} {row.severity:<8} {row.magnitude:>9.3f} "
              f"{row.distortion:>10.3f} {row.test_error:>7.2%}")
    for sev, mean in baseline.group_means().items():
        print(f"{'mean':<8} {sev:<8} {'':>9} {'':>10} {mean:>7.2%}")
    print(f"SI held-out error: {baseline.si_test_error:.2%}")


def _print_checks(checks) -> None:
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")


def cmd_train_si(args: argparse.Namespace) -> int:
    _, exp, out_dir = _load(args)
    si, baseline = train_baseline(exp)
    save_si(si, baseline, out_dir)
    _print_baseline(baseline)
    return EXIT_OK


def cmd_roster(args: argparse.Namespace) -> int:
    _, exp, out_dir = _load(args)
    print(f"{'speaker':<8} {'severity':<8} {'magnitude':>9} {'distortion':>10}")
    for p in exp.roster:
        print(f"{p.speaker_id:<8} {p.severity.value:<8} {p.magnitude:>9.3f} {p.distortion:>10.3f}")
        if args.export:
            splits = split_speaker(p, exp.task, exp.splits)
            for part in ("adapt_pool", "cv", "test"):
                data = getattr(splits, part)
                save_dataset(data, out_dir / "data" / f"{p.speaker_id}_{part}.adlb")
                export_csv(data, out_dir / "data" / f"{p.speaker_id}_{part}.csv")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    _, exp, out_dir = _load(args)
    try:
        profile = exp.speaker(args.speaker)
        method = exp.method(args.method, rho=args.rho)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e
    if args.rho is not None and (method.kld is None or method.is_rsi):
        raise UsageError(f"--rho does not apply to method {method.name!r}")
    size = exp.splits.adapt_pool if args.size is None else args.size
    if not 1 <= size <= exp.splits.adapt_pool:
        raise UsageError(f"--size must be in [1, {exp.splits.adapt_pool}], got {size}")

    si, baseline = load_or_train_si(exp, out_dir)
    splits = split_speaker(profile, exp.task, exp.splits)
    speaker = adapt(si, method, splits.subset(size), splits.cv, seed=exp.seed)
    before = next(r.test_error for r in baseline.rows if r.speaker_id == profile.speaker_id)
    after = error_rate(speaker.model, splits.test)
    suffix = f"_rho{method.rho:g}" if method.kld is not None and not method.is_rsi else ""
    path = out_dir / "speakers" / f"{profile.speaker_id}_{method.name.replace('+', '-')}_{size}{suffix}.adlb"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_speaker_model(speaker, si, path)
    print(f"{profile.speaker_id} ({profile.severity.value}) {method.name} size={size}: "
          f"SI {before:.2%} -> adapted {after:.2%} "
          f"({speaker.adapted_parameter_count} adapted parameters, "
          f"{len(speaker.trace.epochs)} epochs)")
    print(f"Saved {path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    _, exp, out_dir = _load(args, methods=args.methods, sizes=args.sizes, rho_grid=args.rho, jobs=args.jobs)
    si, baseline = load_or_train_si(exp, out_dir)
    result = run_sweep(exp, si, out_dir, resume=args.resume)
    checks = write_reports(exp, result, baseline, out_dir)
    failed = result.failed()
    print(f"{len(result) - len(failed)} of {len(build_cells(exp))} cells succeeded; results in {out_dir}")
    for r in failed:
        print(f"  failed {r.key}: {r.reason}")
    _print_checks(checks)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _, exp, out_dir = _load(args)
    if (out_dir / RESULTS_CSV).exists():
        result = read_csv(out_dir / RESULTS_CSV)
    elif (out_dir / JOURNAL).exists():
        done = read_journal(out_dir / JOURNAL)
        result = ExperimentResult([done[c.key] for c in build_cells(exp) if c.key in done])
    else:
        raise FileNotFoundError(f"no {RESULTS_CSV} or {JOURNAL} in {out_dir}")
    baseline = read_baseline_csv(out_dir / BASELINE_CSV)
    rows = group_report(result, baseline)
    emit_group_csv(rows, out_dir / GROUPS_CSV)
    emit_plotdata(result, out_dir / PLOTS_DIR, baseline, exp.rho_selection)
    order = {s.value: i for i, s in enumerate(SEVERITY_ORDER)}
    print(f"{'severity':<8} {'method':<14} {'size':>5} {'rho':>7} {'n':>3} {'mean':>7} {'min':>7} {'max':>7} {'params':>7}")
    for row in sorted(rows, key=lambda r: (order.get(r.severity, 99), r.adaptation_size)):
        rho = "" if row.rho is None else f"{row.rho:g}"
        print(f"{row.severity:<8} {row.method:<14} {row.adaptation_size:>5} {rho:>7} {row.n_speakers:>3} "
              f"{row.mean_error:>7.2%} {row.min_error:>7.2%} {row.max_error:>7.2%} {row.adapted_param_count:>7}")
    _print_checks(trend_checks(result, baseline, exp.rho_selection))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.fixtures < 1 or args.tol <= 0:
        raise UsageError("--fixtures must be >= 1 and --tol > 0")
    base = args.seed if args.seed is not None else 0
    ok = True
    for seed in range(base, base + args.fixtures):
        model, batch, targets = gradcheck_fixture(seed)
        report = gradcheck(model, batch, targets, tolerance=args.tol, order=args.order)
        print(f"fixture {seed}: hidden={list(model.spec.hidden_dims)} "
              f"lin={model.lin is not None} lhuc={model.lhuc is not None}")
        print(report.format())
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_RUNTIME


_COMMANDS = {
    "train-si": "cmd_train_si",
    "roster": "cmd_roster",
    "adapt": "cmd_adapt",
    "sweep": "cmd_sweep",
    "report": "cmd_report",
    "gradcheck": "cmd_gradcheck",
}


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out_dir", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    handler = globals()[_COMMANDS[args.command]]
    try:
        code = handler(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"adaptlab: error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("Interrupted. Finished cells are kept; rerun sweep with --resume to continue.")
        code = EXIT_RUNTIME
    except (CheckpointError, DivergenceError, InsufficientDataError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, sanitize_log_message(e))
        code = EXIT_RUNTIME
    sys.exit(code)


if __name__ == "__main__":
    main()
