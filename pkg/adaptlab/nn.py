"""
Dense classifier engine: forward pass, softmax / cross-entropy against arbitrary
target distributions, exact backpropagation, and freeze-aware SGD.

Layout convention: layer l maps h^(l-1) (rows = samples) to
z^l = h^(l-1) @ W^l + b^l, with W^l shaped (fan_in, fan_out). The optional LIN
layer is applied to the raw features first; optional LHUC gates rescale each
hidden layer's output elementwise.
"""
from __future__ import annotations

import dataclasses
import logging
import zlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

from adaptlab.activations import ACTIVATIONS, amplitude, amplitude_grad, get_activation
from adaptlab.early_stopping import EarlyStopping
from adaptlab.errors import DivergenceError, InsufficientDataError, ShapeError
from adaptlab.utils import make_rng, one_hot

if TYPE_CHECKING:
    from adaptlab.adapt import LhucParams, LinParams

logger = logging.getLogger(__name__)

# Posteriors are clamped at this value inside log().
LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if len(self.hidden_dims) < 1:
            raise ValueError("NetworkSpec needs at least one hidden layer")
        for name, d in [("input_dim", self.input_dim), ("output_dim", self.output_dim)]:
            if int(d) < 1:
                raise ValueError(f"{name} must be >= 1, got {d!r}")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"hidden_dims must all be >= 1, got {self.hidden_dims!r}")
        get_activation(self.hidden_activation)

    @property
    def n_layers(self) -> int:
        """Weight layers including the softmax layer (L + 1)."""
        return len(self.hidden_dims) + 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def parameter_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    N samples as a (N, D) float64 feature matrix and an (N,) label vector.
    block_size > 1 groups consecutive rows into blocks (one "utterance").
    """
    features: np.ndarray
    labels: np.ndarray
    speaker_id: str = "si"
    block_size: int = 1

    def __post_init__(self) -> None:
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[0] < 1:
            raise InsufficientDataError("dataset must contain at least one sample")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size!r}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], speaker_id: str = "si") -> Dataset:
        if not samples:
            raise InsufficientDataError("dataset must contain at least one sample")
        return cls(
            features=np.stack([np.asarray(s.features, dtype=np.float64) for s in samples]),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            speaker_id=speaker_id,
        )

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_blocks(self) -> int:
        return self.n // self.block_size

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.features[i], int(self.labels[i])) for i in range(self.n)]

    def subset(self, idx: np.ndarray | Sequence[int]) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.speaker_id, 1)

    def take_blocks(self, k: int) -> Dataset:
        """First k blocks (k * block_size rows)."""
        if k < 1 or k > self.n_blocks:
            raise InsufficientDataError(
                f"cannot take {k} blocks from a dataset of {self.n_blocks}"
            )
        rows = k * self.block_size
        return Dataset(self.features[:rows], self.labels[:rows], self.speaker_id, self.block_size)


@dataclass(frozen=True, eq=False)
class NetworkParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    trainable: tuple[bool, ...]

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int, trainable: bool = True) -> NetworkParams:
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in spec.layer_shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(weights), tuple(biases), (trainable,) * spec.n_layers)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> NetworkParams:
        return cls(
            tuple(np.zeros(s) for s in spec.layer_shapes),
            tuple(np.zeros(s[1]) for s in spec.layer_shapes),
            (True,) * spec.n_layers,
        )

    def with_trainable(self, mask: bool | Sequence[bool]) -> NetworkParams:
        if isinstance(mask, (bool, np.bool_)):
            mask = (bool(mask),) * len(self.weights)
        mask = tuple(bool(m) for m in mask)
        if len(mask) != len(self.weights):
            raise ValueError(f"trainable mask needs {len(self.weights)} entries, got {len(mask)}")
        return dataclasses.replace(self, trainable=mask)

    def copy(self) -> NetworkParams:
        return NetworkParams(
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
            self.trainable,
        )

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def validate(self, spec: NetworkSpec) -> None:
        shapes = spec.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ShapeError(
                f"expected {len(shapes)} weight layers, got {len(self.weights)}"
            )
        if len(self.trainable) != len(shapes):
            raise ShapeError(f"trainable mask has {len(self.trainable)} entries, expected {len(shapes)}")
        for l, ((fi, fo), w, b) in enumerate(zip(shapes, self.weights, self.biases), start=1):
            if w.shape != (fi, fo):
                raise ShapeError(f"weight shape {w.shape}, expected {(fi, fo)}", layer=l)
            if b.shape != (fo,):
                raise ShapeError(f"bias shape {b.shape}, expected {(fo,)}", layer=l)


@dataclass(frozen=True, eq=False)
class Model:
    """A base network plus whatever adaptation layers are attached to it."""
    spec: NetworkSpec
    params: NetworkParams
    lin: LinParams | None = None
    lhuc: LhucParams | None = None


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Gradients congruent with a Model; None where a tensor is frozen."""
    weights: tuple[np.ndarray | None, ...]
    biases: tuple[np.ndarray | None, ...]
    lin_weight: np.ndarray | None = None
    lin_bias: np.ndarray | None = None
    gates: tuple[np.ndarray, ...] | None = None

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        """(name, gradient) for every non-frozen tensor, in tensor order."""
        if self.lin_weight is not None:
            yield "lin.weight", self.lin_weight
        if self.lin_bias is not None:
            yield "lin.bias", self.lin_bias
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w is not None:
                yield f"layer{l}.weight", w
            if b is not None:
                yield f"layer{l}.bias", b
        if self.gates is not None:
            for l, r in enumerate(self.gates, start=1):
                yield f"lhuc.r{l}", r


def _as_features(batch: Dataset | np.ndarray) -> np.ndarray:
    if isinstance(batch, Dataset):
        return batch.features
    x = np.asarray(batch, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check_inputs(
    params: NetworkParams,
    spec: NetworkSpec,
    x: np.ndarray,
    gates: LhucParams | None,
    lin: LinParams | None,
) -> None:
    params.validate(spec)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"input has shape {x.shape}, expected (N, {spec.input_dim})",
            layer=0 if lin is not None else 1,
        )
    if lin is not None:
        d = spec.input_dim
        if lin.weight.shape != (d, d) or lin.bias.shape != (d,):
            raise ShapeError(
                f"LIN shapes {lin.weight.shape}/{lin.bias.shape}, expected {(d, d)}/{(d,)}",
                layer=0,
            )
    if gates is not None:
        if len(gates.r) != len(spec.hidden_dims):
            raise ShapeError(
                f"{len(gates.r)} gate vectors for {len(spec.hidden_dims)} hidden layers"
            )
        for l, (r, d) in enumerate(zip(gates.r, spec.hidden_dims), start=1):
            if r.shape != (d,):
                raise ShapeError(f"gate shape {r.shape}, expected {(d,)}", layer=l)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class _LayerCache:
    inputs: np.ndarray
    z: np.ndarray
    out: np.ndarray           # phi(z), before gating
    gate: np.ndarray | None   # a(r) when gated


def _forward_cached(
    params: NetworkParams,
    spec: NetworkSpec,
    x: np.ndarray,
    gates: LhucParams | None,
    lin: LinParams | None,
) -> tuple[np.ndarray, list[_LayerCache]]:
    act, _ = ACTIVATIONS[spec.hidden_activation]
    h = x @ lin.weight + lin.bias if lin is not None else x
    cache: list[_LayerCache] = []
    n_hidden = len(spec.hidden_dims)
    for l in range(n_hidden):
        z = h @ params.weights[l] + params.biases[l]
        u = act(z)
        a = amplitude(gates.r[l]) if gates is not None else None
        cache.append(_LayerCache(h, z, u, a))
        h = u * a if a is not None else u
    logits = h @ params.weights[n_hidden] + params.biases[n_hidden]
    cache.append(_LayerCache(h, logits, logits, None))
    return softmax(logits), cache


def forward(
    params: NetworkParams,
    spec: NetworkSpec,
    batch: Dataset | np.ndarray,
    gates: LhucParams | None = None,
    lin: LinParams | None = None,
) -> np.ndarray:
    """Posterior matrix (N, S); each row sums to 1."""
    x = _as_features(batch)
    _check_inputs(params, spec, x, gates, lin)
    posteriors, _ = _forward_cached(params, spec, x, gates, lin)
    return posteriors


def model_forward(model: Model, batch: Dataset | np.ndarray) -> np.ndarray:
    return forward(model.params, model.spec, batch, gates=model.lhuc, lin=model.lin)


def predict(model: Model, batch: Dataset | np.ndarray) -> np.ndarray:
    return np.argmax(model_forward(model, batch), axis=1)


def error_rate(model: Model, data: Dataset) -> float:
    """Frame classification error in [0, 1]."""
    return float(np.mean(predict(model, data) != data.labels))


def cross_entropy(
    posteriors: np.ndarray,
    targets: np.ndarray,
    log_floor: float = LOG_FLOOR,
) -> float:
    """-(1/N) sum_t sum_y target * log(max(posterior, log_floor))."""
    p = np.asarray(posteriors, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeError(f"posteriors {p.shape} and targets {t.shape} must be congruent (N, S)")
    return float(-np.sum(t * np.log(np.maximum(p, log_floor))) / p.shape[0])


def backward(
    params: NetworkParams,
    spec: NetworkSpec,
    batch: Dataset | np.ndarray,
    targets: np.ndarray,
    gates: LhucParams | None = None,
    lin: LinParams | None = None,
) -> GradientSet:
    """
    Exact gradient of cross_entropy(forward(...), targets) with respect to every
    trainable tensor. Target rows are assumed to sum to 1, which makes the logit
    gradient (posterior - target) / N.
    """
    x = _as_features(batch)
    _check_inputs(params, spec, x, gates, lin)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (x.shape[0], spec.output_dim):
        raise ShapeError(f"targets shape {t.shape}, expected {(x.shape[0], spec.output_dim)}")

    posteriors, cache = _forward_cached(params, spec, x, gates, lin)
    _, act_grad = ACTIVATIONS[spec.hidden_activation]
    n = x.shape[0]
    n_layers = spec.n_layers
    lin_trainable = lin is not None and lin.trainable
    gates_trainable = gates is not None and gates.trainable

    # Lowest layer index that still needs a gradient; -1 means the LIN input.
    needed = [
        params.trainable[l] or (gates_trainable and l < n_layers - 1)
        for l in range(n_layers)
    ]
    lowest = -1 if lin_trainable else next((l for l in range(n_layers) if needed[l]), n_layers)

    dweights: list[np.ndarray | None] = [None] * n_layers
    dbiases: list[np.ndarray | None] = [None] * n_layers
    dgates: list[np.ndarray] = [np.zeros(d) for d in spec.hidden_dims] if gates_trainable else []

    delta = (posteriors - t) / n  # dL/dz at the softmax layer
    for l in range(n_layers - 1, -1, -1):
        if l < lowest:
            break
        c = cache[l]
        if l < n_layers - 1:
            # delta holds dL/dh^l here; undo the gate, then the nonlinearity.
            if c.gate is not None:
                if gates_trainable:
                    dgates[l] = np.sum(delta * c.out, axis=0) * amplitude_grad(c.gate)
                delta = delta * c.gate
            delta = delta * act_grad(c.z, c.out)
        if params.trainable[l]:
            dweights[l] = c.inputs.T @ delta
            dbiases[l] = np.sum(delta, axis=0)
        if l > lowest:
            delta = delta @ params.weights[l].T

    lin_w = lin_b = None
    if lin_trainable:
        lin_w = x.T @ delta
        lin_b = np.sum(delta, axis=0)
    return GradientSet(
        weights=tuple(dweights),
        biases=tuple(dbiases),
        lin_weight=lin_w,
        lin_bias=lin_b,
        gates=tuple(dgates) if gates_trainable else None,
    )


def model_backward(model: Model, batch: Dataset | np.ndarray, targets: np.ndarray) -> GradientSet:
    return backward(model.params, model.spec, batch, targets, gates=model.lhuc, lin=model.lin)


LearningRate = float | Mapping[str, float]


def _group_rate(lr: LearningRate, group: str) -> float:
    if isinstance(lr, Mapping):
        return float(lr[group])
    return float(lr)


def sgd_step(model: Model, grads: GradientSet, lr: LearningRate) -> Model:
    """
    p <- p - lr * g for trainable tensors only. Frozen tensors are carried over
    as the same array objects. lr may be a single rate or a mapping over the
    groups "base", "lin" and "lhuc".
    """
    rates = lr.values() if isinstance(lr, Mapping) else [lr]
    if any(float(r) < 0 for r in rates):
        raise ValueError(f"learning rate must be non-negative, got {lr!r}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise DivergenceError(
                f"non-finite gradient in {name}: {bad} of {g.size} entries"
            )

    params = model.params
    base_lr = _group_rate(lr, "base")
    weights, biases = list(params.weights), list(params.biases)
    for l, trainable in enumerate(params.trainable):
        if not trainable:
            continue
        if grads.weights[l] is not None:
            weights[l] = weights[l] - base_lr * grads.weights[l]
        if grads.biases[l] is not None:
            biases[l] = biases[l] - base_lr * grads.biases[l]
    new_params = NetworkParams(tuple(weights), tuple(biases), params.trainable)

    lin = model.lin
    if lin is not None and lin.trainable and grads.lin_weight is not None:
        lin_lr = _group_rate(lr, "lin")
        lin = dataclasses.replace(
            lin,
            weight=lin.weight - lin_lr * grads.lin_weight,
            bias=lin.bias - lin_lr * grads.lin_bias,
        )
    lhuc = model.lhuc
    if lhuc is not None and lhuc.trainable and grads.gates is not None:
        lhuc_lr = _group_rate(lr, "lhuc")
        lhuc = dataclasses.replace(
            lhuc, r=tuple(r - lhuc_lr * g for r, g in zip(lhuc.r, grads.gates))
        )
    return Model(model.spec, new_params, lin, lhuc)


def trainable_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    """Trainable tensors in the same order GradientSet.items() yields them."""
    out: list[tuple[str, np.ndarray]] = []
    if model.lin is not None and model.lin.trainable:
        out += [("lin.weight", model.lin.weight), ("lin.bias", model.lin.bias)]
    for l, (w, b, t) in enumerate(
        zip(model.params.weights, model.params.biases, model.params.trainable), start=1
    ):
        if t:
            out += [(f"layer{l}.weight", w), (f"layer{l}.bias", b)]
    if model.lhuc is not None and model.lhuc.trainable:
        out += [(f"lhuc.r{l}", r) for l, r in enumerate(model.lhuc.r, start=1)]
    return out


def with_tensors(model: Model, arrays: Sequence[np.ndarray]) -> Model:
    """Inverse of trainable_tensors: substitute new values for the trainable tensors."""
    it = iter(arrays)
    lin = model.lin
    if lin is not None and lin.trainable:
        lin = dataclasses.replace(lin, weight=next(it), bias=next(it))
    weights, biases = list(model.params.weights), list(model.params.biases)
    for l, t in enumerate(model.params.trainable):
        if t:
            weights[l], biases[l] = next(it), next(it)
    lhuc = model.lhuc
    if lhuc is not None and lhuc.trainable:
        lhuc = dataclasses.replace(lhuc, r=tuple(next(it) for _ in lhuc.r))
    params = NetworkParams(tuple(weights), tuple(biases), model.params.trainable)
    return Model(model.spec, params, lin, lhuc)


def params_checksum(params: NetworkParams) -> int:
    """CRC32 over every weight and bias, little-endian float64."""
    crc = 0
    for w, b in zip(params.weights, params.biases):
        crc = zlib.crc32(np.ascontiguousarray(w, dtype="<f8").tobytes(), crc)
        crc = zlib.crc32(np.ascontiguousarray(b, dtype="<f8").tobytes(), crc)
    return crc


# -- training -----------------------------------------------------------------

TargetFn = Callable[[Dataset, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HardTargets:
    """One-hot targets delta(y = s_t)."""
    n_classes: int

    def __call__(self, data: Dataset, idx: np.ndarray) -> np.ndarray:
        return one_hot(data.labels[idx], self.n_classes)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 0.001
    seed: int = 0
    patience: int | None = 10
    lr_decay: float = 1.0
    gradient_reduction: Literal["mean", "sum"] = "mean"
    restore_best: bool = True
    group_learning_rates: Mapping[str, float] | None = field(default=None, hash=False)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1 or None, got {self.patience!r}")
        if not 0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay!r}")
        if self.gradient_reduction not in ("mean", "sum"):
            raise ValueError(
                f"gradient_reduction must be 'mean' or 'sum', got {self.gradient_reduction!r}"
            )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    train_error: float
    cv_loss: float
    cv_error: float


@dataclass
class TrainTrace:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def cv_errors(self) -> list[float]:
        return [e.cv_error for e in self.epochs]

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def _scaled_rate(schedule: TrainSchedule, lr: float, batch_len: int) -> LearningRate:
    scale = batch_len if schedule.gradient_reduction == "sum" else 1
    if schedule.group_learning_rates:
        decay = lr / schedule.learning_rate if schedule.learning_rate else 1.0
        return {g: r * decay * scale for g, r in schedule.group_learning_rates.items()}
    return lr * scale


def train(
    model: Model,
    train_data: Dataset,
    cv_data: Dataset,
    schedule: TrainSchedule,
    target_fn: TargetFn | None = None,
) -> tuple[Model, TrainTrace]:
    """
    Minibatch SGD over `train_data` for up to schedule.epochs epochs.

    target_fn maps (dataset, row indices) to target rows; defaults to hard
    one-hot labels. CV loss and error are always measured against hard labels
    and drive early stopping. Raises DivergenceError when the training loss
    goes non-finite.
    """
    if train_data.feature_dim != model.spec.input_dim or cv_data.feature_dim != model.spec.input_dim:
        raise ShapeError(
            f"dataset feature dim {train_data.feature_dim}/{cv_data.feature_dim} "
            f"does not match input_dim {model.spec.input_dim}",
            layer=0 if model.lin is not None else 1,
        )
    hard = HardTargets(model.spec.output_dim)
    target_fn = target_fn or hard
    trace = TrainTrace()
    if schedule.epochs == 0:
        return model, trace

    rng = make_rng(schedule.seed)
    monitor = EarlyStopping(schedule.patience) if schedule.patience is not None else None
    best_model = model
    lr = schedule.learning_rate
    all_train = np.arange(train_data.n)
    all_cv = np.arange(cv_data.n)
    cv_targets = hard(cv_data, all_cv)

    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(train_data.n)
        for start in range(0, train_data.n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            grads = model_backward(model, train_data.features[idx], target_fn(train_data, idx))
            model = sgd_step(model, grads, _scaled_rate(schedule, lr, len(idx)))

        train_post = model_forward(model, train_data)
        train_loss = cross_entropy(train_post, target_fn(train_data, all_train))
        if not np.isfinite(train_loss):
            raise DivergenceError(f"training loss is non-finite at epoch {epoch}")
        cv_post = model_forward(model, cv_data)
        record = EpochRecord(
            epoch=epoch,
            learning_rate=lr,
            train_loss=train_loss,
            train_error=float(np.mean(np.argmax(train_post, axis=1) != train_data.labels)),
            cv_loss=cross_entropy(cv_post, cv_targets),
            cv_error=float(np.mean(np.argmax(cv_post, axis=1) != cv_data.labels)),
        )
        trace.epochs.append(record)
        logger.debug(
            "epoch %d lr=%.3g train_loss=%.5f train_err=%.4f cv_loss=%.5f cv_err=%.4f",
            epoch, lr, record.train_loss, record.train_error, record.cv_loss, record.cv_error,
        )

        if monitor is None:
            trace.best_epoch = epoch
        else:
            event = monitor.update(record.cv_error)
            if event == "Improved":
                best_model = model
                trace.best_epoch = epoch
            elif event == "Stop":
                trace.stopped_early = True
                logger.debug("early stop at epoch %d (best %d)", epoch, trace.best_epoch)
                break
        lr *= schedule.lr_decay

    if monitor is not None and schedule.restore_best:
        model = best_model
    return model, trace
