"""
Speaker adaptation of a trained SI network: LIN insertion, LHUC gates,
KLD-regularised retraining (RSI is its rho = 0 case) and their combinations.

With LIN and/or LHUC the SI weights stay frozen and only the inserted tensors
train. KLD on its own retrains every SI weight. Combining KLD with LIN/LHUC
keeps the SI weights frozen and only swaps in the blended targets.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from adaptlab.activations import amplitude
from adaptlab.checkpoint import (
    Kind,
    PayloadReader,
    PayloadWriter,
    read_container,
    read_params,
    read_spec,
    si_fingerprint,
    write_container,
    write_params,
    write_spec,
)
from adaptlab.errors import ArtifactMismatchError, CheckpointError, ShapeError
from adaptlab.nn import (
    Dataset,
    HardTargets,
    Model,
    NetworkSpec,
    TrainSchedule,
    TrainTrace,
    model_forward,
    train,
)
from adaptlab.utils import one_hot, sanitize_log_message

logger = logging.getLogger(__name__)

# Initial learning rates per method family.
LIN_LEARNING_RATE = 0.00001
KLD_LEARNING_RATE = 0.001
LHUC_LEARNING_RATE = 0.01

DEFAULT_ADAPT_SCHEDULE = TrainSchedule(
    epochs=12,
    batch_size=8,
    learning_rate=KLD_LEARNING_RATE,
    patience=10,
    gradient_reduction="sum",
)

METHOD_TOKENS = ("lin", "lhuc", "kld", "rsi", "lin+lhuc", "lin+kld", "lhuc+kld", "lin+lhuc+kld")


@dataclass(frozen=True, eq=False)
class LinParams:
    """Affine input transform x' = x @ A + b, identity activation."""
    weight: np.ndarray
    bias: np.ndarray
    trainable: bool = True

    @classmethod
    def identity(cls, dim: int) -> LinParams:
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def n_parameters(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True, eq=False)
class LhucParams:
    """theta = {r^1, ..., r^L}; hidden layer l is scaled by a(r^l)."""
    r: tuple[np.ndarray, ...]
    trainable: bool = True

    @classmethod
    def zeros(cls, hidden_dims: tuple[int, ...]) -> LhucParams:
        return cls(tuple(np.zeros(d) for d in hidden_dims))

    @property
    def n_parameters(self) -> int:
        return sum(r.size for r in self.r)

    def amplitudes(self) -> tuple[np.ndarray, ...]:
        return tuple(lhuc_gate(r) for r in self.r)


@dataclass(frozen=True)
class KldConfig:
    rho: float
    # False means plain retraining on hard labels (RSI), which requires rho == 0.
    blend: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho!r}")
        if not self.blend and self.rho != 0.0:
            raise ValueError(f"RSI (blend=False) requires rho == 0, got {self.rho!r}")


@dataclass(frozen=True)
class AdaptMethod:
    use_lin: bool = False
    use_lhuc: bool = False
    kld: KldConfig | None = None
    learning_rate: float | None = None
    schedule: TrainSchedule = DEFAULT_ADAPT_SCHEDULE
    group_learning_rates: Mapping[str, float] | None = field(default=None, hash=False)

    def __post_init__(self) -> None:
        if not (self.use_lin or self.use_lhuc or self.kld is not None):
            raise ValueError("AdaptMethod needs at least one of LIN, LHUC or KLD")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", self.default_learning_rate())
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.group_learning_rates is not None:
            unknown = set(self.group_learning_rates) - {"base", "lin", "lhuc"}
            if unknown:
                raise ValueError(f"unknown learning-rate groups {sorted(unknown)}")

    @property
    def freeze_base(self) -> bool:
        return self.use_lin or self.use_lhuc

    @property
    def is_rsi(self) -> bool:
        return self.kld is not None and not self.kld.blend

    @property
    def rho(self) -> float | None:
        return self.kld.rho if self.kld is not None else None

    @property
    def name(self) -> str:
        if self.is_rsi and not self.freeze_base:
            return "rsi"
        parts = [p for p, on in (("lin", self.use_lin), ("lhuc", self.use_lhuc)) if on]
        if self.kld is not None:
            parts.append("kld")
        return "+".join(parts)

    def default_learning_rate(self) -> float:
        """Smallest of the constituent methods' rates."""
        rates = []
        if self.use_lin:
            rates.append(LIN_LEARNING_RATE)
        if self.use_lhuc:
            rates.append(LHUC_LEARNING_RATE)
        if self.kld is not None:
            rates.append(KLD_LEARNING_RATE)
        return min(rates)

    def with_rho(self, rho: float) -> AdaptMethod:
        if self.kld is None or self.is_rsi:
            raise ValueError(f"method {self.name!r} has no regularization weight")
        return dataclasses.replace(self, kld=KldConfig(rho))

    def training_schedule(self, seed: int | None = None) -> TrainSchedule:
        group_rates = None
        if self.group_learning_rates is not None:
            group_rates = {g: self.group_learning_rates.get(g, self.learning_rate)
                           for g in ("base", "lin", "lhuc")}
        return dataclasses.replace(
            self.schedule,
            learning_rate=self.learning_rate,
            group_learning_rates=group_rates,
            seed=self.schedule.seed if seed is None else seed,
        )

    @classmethod
    def parse(
        cls,
        token: str,
        rho: float | None = None,
        schedule: TrainSchedule = DEFAULT_ADAPT_SCHEDULE,
        learning_rate: float | None = None,
    ) -> AdaptMethod:
        """Build a method from a CLI token such as "lin+kld" or "rsi"."""
        token = token.strip().lower()
        if token not in METHOD_TOKENS:
            raise ValueError(f"unknown method {token!r}; expected one of {', '.join(METHOD_TOKENS)}")
        if token == "rsi":
            kld: KldConfig | None = KldConfig(0.0, blend=False)
        elif "kld" in token.split("+"):
            kld = KldConfig(0.25 if rho is None else rho)
        else:
            kld = None
        parts = token.split("+")
        return cls(
            use_lin="lin" in parts,
            use_lhuc="lhuc" in parts,
            kld=kld,
            learning_rate=learning_rate,
            schedule=schedule,
        )


BlendedTarget = np.ndarray


def lhuc_gate(r: np.ndarray) -> np.ndarray:
    """a(r) = 2 / (1 + exp(-r)), elementwise, in (0, 2)."""
    return amplitude(r)


def insert_lin(si: Model) -> Model:
    """Prepend an identity-initialised LIN layer and freeze the SI weights."""
    if si.lin is not None:
        raise ValueError("model already carries a LIN layer")
    return Model(
        si.spec,
        si.params.with_trainable(False),
        LinParams.identity(si.spec.input_dim),
        si.lhuc,
    )


def insert_lhuc(si: Model) -> Model:
    """Attach zero-initialised LHUC gates after every hidden layer and freeze the SI weights."""
    if si.lhuc is not None:
        raise ValueError("model already carries LHUC gates")
    return Model(
        si.spec,
        si.params.with_trainable(False),
        si.lin,
        LhucParams.zeros(si.spec.hidden_dims),
    )


def blend_targets(labels: np.ndarray, si_posteriors: np.ndarray, rho: float) -> BlendedTarget:
    """(1 - rho) * delta(y = s_t) + rho * p_SI(y | x_t), row by row."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho!r}")
    p = np.asarray(si_posteriors, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or p.shape[0] != labels.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for SI posteriors of shape {p.shape}")
    return (1.0 - rho) * one_hot(labels, p.shape[1]) + rho * p


def cache_si_posteriors(si: Model, data: Dataset) -> np.ndarray:
    """SI posteriors for `data`, computed once and returned read-only."""
    post = model_forward(si, data)
    post.setflags(write=False)
    return post


@dataclass(frozen=True, eq=False)
class BlendedTargets:
    """Target function over a fixed dataset using cached SI posteriors."""
    si_posteriors: np.ndarray
    rho: float

    def __call__(self, data: Dataset, idx: np.ndarray) -> np.ndarray:
        if data.n != self.si_posteriors.shape[0]:
            raise ShapeError(
                f"cached SI posteriors cover {self.si_posteriors.shape[0]} samples, "
                f"dataset has {data.n}"
            )
        return blend_targets(data.labels[idx], self.si_posteriors[idx], self.rho)


@dataclass(frozen=True)
class ParamCount:
    adapted: int
    total: int


def parameter_count(method: AdaptMethod, spec: NetworkSpec) -> ParamCount:
    si_total = spec.parameter_count()
    lin = spec.input_dim ** 2 + spec.input_dim if method.use_lin else 0
    lhuc = sum(spec.hidden_dims) if method.use_lhuc else 0
    adapted = lin + lhuc if method.freeze_base else si_total
    return ParamCount(adapted=adapted, total=si_total + lin + lhuc)


@dataclass(eq=False)
class SpeakerModel:
    speaker_id: str
    method: AdaptMethod
    model: Model
    trace: TrainTrace

    @property
    def adapted_parameter_count(self) -> int:
        return parameter_count(self.method, self.model.spec).adapted

    def trained_tensors(self) -> dict[str, np.ndarray]:
        """Only the speaker-dependent tensors."""
        out: dict[str, np.ndarray] = {}
        if self.model.lin is not None:
            out["lin.weight"] = self.model.lin.weight
            out["lin.bias"] = self.model.lin.bias
        if self.model.lhuc is not None:
            for l, r in enumerate(self.model.lhuc.r, start=1):
                out[f"lhuc.r{l}"] = r
        if not self.method.freeze_base:
            for l, (w, b) in enumerate(zip(self.model.params.weights, self.model.params.biases), start=1):
                out[f"layer{l}.weight"] = w
                out[f"layer{l}.bias"] = b
        return out


def adapt(
    si: Model,
    method: AdaptMethod,
    adapt_train: Dataset,
    adapt_cv: Dataset,
    seed: int | None = None,
) -> SpeakerModel:
    """Adapt the SI model to one speaker's data with the given method."""
    if si.lin is not None or si.lhuc is not None:
        raise ValueError("SI model must not carry adaptation layers")
    model = Model(si.spec, si.params.with_trainable(not method.freeze_base))
    if method.use_lin:
        model = insert_lin(model)
    if method.use_lhuc:
        model = insert_lhuc(model)

    if method.kld is not None and method.kld.blend:
        target_fn = BlendedTargets(cache_si_posteriors(si, adapt_train), method.kld.rho)
    else:
        target_fn = HardTargets(si.spec.output_dim)

    logger.info(
        "Adapting %s with %s (rho=%s, lr=%g) on %d samples",
        sanitize_log_message(adapt_train.speaker_id), method.name, method.rho,
        method.learning_rate, adapt_train.n,
    )
    adapted, trace = train(model, adapt_train, adapt_cv, method.training_schedule(seed), target_fn)
    return SpeakerModel(adapt_train.speaker_id, method, adapted, trace)


# -- speaker artifacts ----------------------------------------------------------

_FLAG_LIN, _FLAG_LHUC, _FLAG_KLD, _FLAG_BLEND = 1, 2, 4, 8


def save_speaker_model(speaker: SpeakerModel, si: Model, path: str | Path) -> None:
    """
    Write only the speaker-dependent tensors plus the method descriptor and a
    fingerprint of the SI model they were trained against.
    """
    m = speaker.method
    flags = (
        (_FLAG_LIN if m.use_lin else 0)
        | (_FLAG_LHUC if m.use_lhuc else 0)
        | (_FLAG_KLD if m.kld is not None else 0)
        | (_FLAG_BLEND if m.kld is not None and m.kld.blend else 0)
    )
    w = PayloadWriter()
    w.pack("B", flags)
    w.pack("d", m.rho if m.rho is not None else math.nan)
    w.pack("d", m.learning_rate)
    w.raw(si_fingerprint(si.spec, si.params))
    encoded_id = speaker.speaker_id.encode("utf-8")
    w.pack("H", len(encoded_id))
    w.raw(encoded_id)
    write_spec(w, speaker.model.spec)
    if m.freeze_base:
        if speaker.model.lin is not None:
            w.array(speaker.model.lin.weight)
            w.array(speaker.model.lin.bias)
        if speaker.model.lhuc is not None:
            for r in speaker.model.lhuc.r:
                w.array(r)
    else:
        write_params(w, speaker.model.spec, speaker.model.params)
    write_container(path, Kind.SPEAKER_ARTIFACT, w.getvalue())


def load_speaker_model(path: str | Path, si: Model) -> SpeakerModel:
    """Rebuild an adapted model on top of `si`; rejects artifacts made for another SI model."""
    r = PayloadReader(read_container(path, Kind.SPEAKER_ARTIFACT))
    (flags,) = r.unpack("B")
    (rho,) = r.unpack("d")
    (lr,) = r.unpack("d")
    fingerprint = r.raw(32)
    if fingerprint != si_fingerprint(si.spec, si.params):
        raise ArtifactMismatchError(f"{path}: artifact was trained against a different SI model")
    (id_len,) = r.unpack("H")
    speaker_id = r.raw(id_len).decode("utf-8")
    spec = read_spec(r)
    if spec != si.spec:
        raise ArtifactMismatchError(f"{path}: spec {spec} does not match SI spec {si.spec}")

    kld = None
    if flags & _FLAG_KLD:
        kld = KldConfig(rho, blend=bool(flags & _FLAG_BLEND))
    method = AdaptMethod(
        use_lin=bool(flags & _FLAG_LIN),
        use_lhuc=bool(flags & _FLAG_LHUC),
        kld=kld,
        learning_rate=lr,
    )
    if method.freeze_base:
        lin = lhuc = None
        if method.use_lin:
            d = spec.input_dim
            lin = LinParams(r.array((d, d)), r.array((d,)))
        if method.use_lhuc:
            lhuc = LhucParams(tuple(r.array((h,)) for h in spec.hidden_dims))
        model = Model(spec, si.params.with_trainable(False), lin, lhuc)
    else:
        model = Model(spec, read_params(r, spec))
    if not r.exhausted:
        raise CheckpointError(f"{path}: unexpected bytes after the speaker tensors")
    return SpeakerModel(speaker_id, method, model, TrainTrace())
