"""
Load and validate config.yaml with defaults.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from adaptlab.adapt import METHOD_TOKENS

OUT_DIR_ENV = "ADAPTLAB_OUT"
DEFAULT_OUT_DIR = "runs"

DEFAULT_HIDDEN_DIMS = (64, 64, 64, 64)
DEFAULT_ACTIVATION = "sigmoid"
DEFAULT_SIZES = (5, 10, 20, 40, 80, 100, 150, 200, 250, 300)
DEFAULT_RHO_GRID = (0.0625, 0.125, 0.25, 0.5)
DEFAULT_METHODS = ("lin", "lhuc", "rsi", "kld")


@dataclass
class TaskConfig:
    n_classes: int = 10
    feature_dim: int = 20
    seed: int = 1
    class_sep: float = 1.5
    within_std: float = 1.0
    block_size: int = 10


@dataclass
class RosterConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"slight": 2, "medium": 4, "heavy": 4})
    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: {
        "slight": (0.05, 0.1), "medium": (0.45, 0.55), "heavy": (0.6, 1.0),
    })
    seed: int = 7
    matrix_scale: float = 4.0
    shift_scale: float = 3.0
    noise_scale: float = 1.0
    adapt_pool: int = 300
    cv: int = 50
    test: int = 100


@dataclass
class NetworkConfig:
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN_DIMS
    activation: str = DEFAULT_ACTIVATION


@dataclass
class SITrainingConfig:
    n_train: int = 10000
    n_cv: int = 1000
    n_test: int = 2000
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 0.2
    patience: int | None = 5
    seed: int = 0


@dataclass
class AdaptationConfig:
    epochs: int = 12
    batch_size: int = 8
    patience: int | None = 10
    gradient_reduction: str = "sum"
    # Optional per-method overrides keyed by method token ("lin", "lin+kld", ...).
    learning_rates: dict[str, float] = field(default_factory=dict)


@dataclass
class SweepConfig:
    methods: tuple[str, ...] = DEFAULT_METHODS
    sizes: tuple[int, ...] = DEFAULT_SIZES
    rho_grid: tuple[float, ...] = DEFAULT_RHO_GRID
    rho_selection: str = "global"
    jobs: int = 1
    seed: int = 0


@dataclass
class OutputConfig:
    out_dir: str | None = None


@dataclass
class Config:
    task: TaskConfig
    roster: RosterConfig
    network: NetworkConfig
    si_training: SITrainingConfig
    adaptation: AdaptationConfig
    sweep: SweepConfig
    output: OutputConfig

    @classmethod
    def load(cls, path: str | Path | None = None) -> Config:
        if path is None:
            path = _default_config_path()
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Config:
        def section(key: str) -> dict[str, Any]:
            raw = data.get(key) or {}
            if not isinstance(raw, dict):
                raise ValueError(f"section {key!r} must be a mapping, got {raw!r}")
            return raw

        def int_value(sec: dict[str, Any], key: str, default: int | None, minimum: int = 0,
                      allow_none: bool = False) -> int | None:
            if key not in sec:
                return default
            value = sec[key]
            if value is None and allow_none:
                return None
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise ValueError(f"{key} must be an integer >= {minimum}, got {value!r}")
            return value

        def float_value(sec: dict[str, Any], key: str, default: float, minimum: float = 0.0,
                        maximum: float | None = None) -> float:
            if key not in sec:
                return default
            value = sec[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{key} must be a number, got {value!r}")
            if value < minimum or (maximum is not None and value > maximum):
                bound = f"[{minimum}, {maximum}]" if maximum is not None else f">= {minimum}"
                raise ValueError(f"{key} must be {bound}, got {value!r}")
            return float(value)

        def list_value(sec: dict[str, Any], key: str, default: tuple) -> tuple:
            if key not in sec:
                return default
            value = sec[key]
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            if not isinstance(value, list) or not value:
                raise ValueError(f"{key} must be a non-empty list, got {value!r}")
            return tuple(value)

        t = section("task")
        task = TaskConfig(
            n_classes=int_value(t, "n_classes", 10, minimum=2),
            feature_dim=int_value(t, "feature_dim", 20, minimum=1),
            seed=int_value(t, "seed", 1),
            class_sep=float_value(t, "class_sep", 1.5),
            within_std=float_value(t, "within_std", 1.0),
            block_size=int_value(t, "block_size", 10, minimum=1),
        )

        r = section("roster")
        defaults = RosterConfig()
        counts = dict(defaults.counts)
        for sev in ("slight", "medium", "heavy"):
            counts[sev] = int_value(r, sev, counts[sev])
        counts = {k: v for k, v in counts.items() if v > 0}
        if not counts:
            raise ValueError("roster must contain at least one speaker")
        ranges = dict(defaults.ranges)
        raw_ranges = r.get("ranges") or {}
        if not isinstance(raw_ranges, dict):
            raise ValueError(f"ranges must be a mapping, got {raw_ranges!r}")
        for sev, rng in raw_ranges.items():
            if sev not in ranges:
                raise ValueError(f"unknown severity {sev!r} in ranges")
            if not isinstance(rng, (list, tuple)) or len(rng) != 2:
                raise ValueError(f"range for {sev} must be [lo, hi], got {rng!r}")
            ranges[sev] = (float(rng[0]), float(rng[1]))
        roster = RosterConfig(
            counts=counts,
            ranges=ranges,
            seed=int_value(r, "seed", defaults.seed),
            matrix_scale=float_value(r, "matrix_scale", defaults.matrix_scale),
            shift_scale=float_value(r, "shift_scale", defaults.shift_scale),
            noise_scale=float_value(r, "noise_scale", defaults.noise_scale),
            adapt_pool=int_value(r, "adapt_pool", defaults.adapt_pool, minimum=1),
            cv=int_value(r, "cv", defaults.cv, minimum=1),
            test=int_value(r, "test", defaults.test, minimum=1),
        )

        n = section("network")
        hidden = list_value(n, "hidden_dims", DEFAULT_HIDDEN_DIMS)
        if any(isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in hidden):
            raise ValueError(f"hidden_dims must be positive integers, got {list(hidden)!r}")
        network = NetworkConfig(hidden_dims=hidden, activation=n.get("activation") or DEFAULT_ACTIVATION)
        if network.activation not in ("sigmoid", "tanh", "relu", "identity"):
            raise ValueError(f"activation must be sigmoid, tanh, relu or identity, got {network.activation!r}")

        s = section("si_training")
        si_training = SITrainingConfig(
            n_train=int_value(s, "n_train", 10000, minimum=1),
            n_cv=int_value(s, "n_cv", 1000, minimum=1),
            n_test=int_value(s, "n_test", 2000, minimum=1),
            epochs=int_value(s, "epochs", 40),
            batch_size=int_value(s, "batch_size", 8, minimum=1),
            learning_rate=float_value(s, "learning_rate", 0.2),
            patience=int_value(s, "patience", 5, minimum=1, allow_none=True),
            seed=int_value(s, "seed", 0),
        )

        a = section("adaptation")
        reduction = a.get("gradient_reduction", "sum")
        if reduction not in ("mean", "sum"):
            raise ValueError(f"gradient_reduction must be 'mean' or 'sum', got {reduction!r}")
        lrs = a.get("learning_rates") or {}
        if not isinstance(lrs, dict):
            raise ValueError(f"learning_rates must be a mapping, got {lrs!r}")
        for token, lr in lrs.items():
            if token not in METHOD_TOKENS:
                raise ValueError(f"unknown method {token!r} in learning_rates")
            if isinstance(lr, bool) or not isinstance(lr, (int, float)) or lr <= 0:
                raise ValueError(f"learning rate for {token} must be > 0, got {lr!r}")
        adaptation = AdaptationConfig(
            epochs=int_value(a, "epochs", 12),
            batch_size=int_value(a, "batch_size", 8, minimum=1),
            patience=int_value(a, "patience", 10, minimum=1, allow_none=True),
            gradient_reduction=reduction,
            learning_rates={k: float(v) for k, v in lrs.items()},
        )

        w = section("sweep")
        methods = tuple(str(m).strip().lower() for m in list_value(w, "methods", DEFAULT_METHODS))
        for m in methods:
            if m not in METHOD_TOKENS:
                raise ValueError(f"unknown method {m!r}; expected one of {', '.join(METHOD_TOKENS)}")
        sizes = tuple(list_value(w, "sizes", DEFAULT_SIZES))
        for k in sizes:
            if isinstance(k, bool) or not isinstance(k, int) or k < 1 or k > roster.adapt_pool:
                raise ValueError(f"adaptation size must be in [1, {roster.adapt_pool}], got {k!r}")
        rho_grid = tuple(list_value(w, "rho_grid", DEFAULT_RHO_GRID))
        for rho in rho_grid:
            if isinstance(rho, bool) or not isinstance(rho, (int, float)) or not 0.0 <= rho <= 1.0:
                raise ValueError(f"rho must be in [0, 1], got {rho!r}")
        selection = w.get("rho_selection", "global")
        if selection not in ("global", "per_speaker"):
            raise ValueError(f"rho_selection must be 'global' or 'per_speaker', got {selection!r}")
        sweep = SweepConfig(
            methods=methods,
            sizes=sizes,
            rho_grid=tuple(float(x) for x in rho_grid),
            rho_selection=selection,
            jobs=int_value(w, "jobs", 1, minimum=1),
            seed=int_value(w, "seed", 0),
        )

        o = section("output")
        output = OutputConfig(out_dir=o.get("out_dir"))

        return cls(
            task=task,
            roster=roster,
            network=network,
            si_training=si_training,
            adaptation=adaptation,
            sweep=sweep,
            output=output,
        )


def resolve_out_dir(flag: str | Path | None, config: Config) -> Path:
    """--out-dir, then $ADAPTLAB_OUT, then output.out_dir, then ./runs."""
    if flag:
        return Path(flag)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    if config.output.out_dir:
        return Path(config.output.out_dir)
    return Path(DEFAULT_OUT_DIR)


def _default_config_path() -> Path:
    # Always resolve relative to the installed package, not the process CWD.
    return Path(__file__).resolve().parent.parent / "config.yaml"
