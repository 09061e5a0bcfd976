"""
Independent ground truth for the engine: central finite differences and naive
loop implementations of the forward pass and the losses. Slow on purpose.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from adaptlab.adapt import LhucParams, LinParams
from adaptlab.errors import DivergenceError, ShapeError
from adaptlab.nn import (
    LOG_FLOOR,
    Model,
    NetworkParams,
    NetworkSpec,
    model_backward,
    trainable_tensors,
    with_tensors,
)

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-8

# Central-difference stencils: ((offset in eps, integer weight), ...), denominator.
_STENCILS: dict[int, tuple[tuple[tuple[int, int], ...], int]] = {
    2: (((1, 1), (-1, -1)), 2),
    4: (((2, -1), (1, 8), (-1, -8), (-2, 1)), 12),
}


def numeric_gradient(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    order: int = 2,
) -> list[np.ndarray]:
    """
    Central differences, one coordinate at a time. order=2 is
    (f(p + eps) - f(p - eps)) / (2 eps); order=4 adds the p +/- 2 eps points
    and cancels the eps^2 truncation term.

    loss_fn may return np.longdouble; differences are taken before rounding
    back to float64.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon!r}")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order!r}")
    stencil, denominator = _STENCILS[order]
    base = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in base]
    for k, p in enumerate(base):
        flat = p.reshape(-1)
        g = grads[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for offset, weight in stencil:
                flat[i] = orig + offset * epsilon
                f = loss_fn(base)
                if not math.isfinite(f):
                    flat[i] = orig
                    raise DivergenceError(f"non-finite loss while perturbing tensor {k} coordinate {i}")
                total = total + weight * f
            flat[i] = orig
            g[i] = total / (denominator * epsilon)
    return grads


def _act(name: str, z: float) -> float:
    if name == "sigmoid":
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    if name == "tanh":
        return math.tanh(z)
    if name == "relu":
        return z if z > 0 else 0.0
    return z


def _gate(r: float) -> float:
    return 2.0 / (1.0 + math.exp(-r))


def reference_forward(
    params: NetworkParams,
    spec: NetworkSpec,
    batch: np.ndarray,
    gates: Sequence[np.ndarray] | None = None,
    lin: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Triple-loop forward pass; `lin` is (A, b), `gates` the r^l vectors."""
    x_all = np.asarray(batch, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[1] != spec.input_dim:
        raise ShapeError(f"batch shape {x_all.shape}, expected (N, {spec.input_dim})", layer=1)
    shapes = spec.layer_shapes
    for l, (w, (fi, fo)) in enumerate(zip(params.weights, shapes), start=1):
        if w.shape != (fi, fo):
            raise ShapeError(f"weight shape {w.shape}, expected {(fi, fo)}", layer=l)

    out = np.zeros((x_all.shape[0], spec.output_dim))
    for n in range(x_all.shape[0]):
        h = [float(v) for v in x_all[n]]
        if lin is not None:
            a_mat, b_vec = lin
            h = [
                math.fsum(h[i] * float(a_mat[i, j]) for i in range(len(h))) + float(b_vec[j])
                for j in range(len(h))
            ]
        for l, (fi, fo) in enumerate(shapes):
            w, b = params.weights[l], params.biases[l]
            z = [math.fsum(h[i] * float(w[i, j]) for i in range(fi)) + float(b[j]) for j in range(fo)]
            if l == len(shapes) - 1:
                h = z
            else:
                h = [_act(spec.hidden_activation, v) for v in z]
                if gates is not None:
                    h = [_gate(float(gates[l][j])) * h[j] for j in range(fo)]
        m = max(h)
        e = [math.exp(v - m) for v in h]
        s = math.fsum(e)
        out[n] = [v / s for v in e]
    return out


def reference_model_forward(model: Model, batch: np.ndarray) -> np.ndarray:
    return reference_forward(
        model.params,
        model.spec,
        batch,
        gates=model.lhuc.r if model.lhuc is not None else None,
        lin=(model.lin.weight, model.lin.bias) if model.lin is not None else None,
    )


def reference_loss(posteriors: np.ndarray, targets: np.ndarray, log_floor: float = LOG_FLOOR) -> float:
    """-(1/N) sum_t sum_y target * log p, as an explicit double loop."""
    p = np.asarray(posteriors, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeError(f"posteriors {p.shape} and targets {t.shape} must be congruent (N, S)")
    terms = []
    for n in range(p.shape[0]):
        for y in range(p.shape[1]):
            terms.append(float(t[n, y]) * math.log(max(float(p[n, y]), log_floor)))
    return -math.fsum(terms) / p.shape[0]


def reference_kld_loss(
    posteriors: np.ndarray,
    labels: np.ndarray,
    si_posteriors: np.ndarray,
    rho: float,
    log_floor: float = LOG_FLOOR,
) -> float:
    """(1 - rho) * CE against the labels + rho * CE against the SI posteriors."""
    p = np.asarray(posteriors, dtype=np.float64)
    hard = np.zeros_like(p)
    for n, y in enumerate(labels):
        hard[n, int(y)] = 1.0
    ce_hard = reference_loss(p, hard, log_floor)
    ce_si = reference_loss(p, si_posteriors, log_floor)
    return (1.0 - rho) * ce_hard + rho * ce_si


def _extended_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return 1 / (1 + np.exp(-z))
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0)
    return z


def extended_loss(model: Model, batch: np.ndarray, targets: np.ndarray) -> np.longdouble:
    """
    Cross-entropy of the model on `batch`, computed in np.longdouble from the
    float64 parameters. Where the platform's long double is wider than float64
    this keeps finite-difference roundoff well below the gradient tolerance.
    """
    ld = np.longdouble
    spec = model.spec
    h = np.asarray(batch, dtype=ld)
    if model.lin is not None:
        h = h @ model.lin.weight.astype(ld) + model.lin.bias.astype(ld)
    n_hidden = len(spec.hidden_dims)
    for l in range(n_hidden):
        h = _extended_activation(spec.hidden_activation, h @ model.params.weights[l].astype(ld)
                                 + model.params.biases[l].astype(ld))
        if model.lhuc is not None:
            h = h * (2 / (1 + np.exp(-model.lhuc.r[l].astype(ld))))
    logits = h @ model.params.weights[n_hidden].astype(ld) + model.params.biases[n_hidden].astype(ld)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    t = np.asarray(targets, dtype=ld)
    return -(t * np.maximum(log_p, np.log(ld(LOG_FLOOR)))).sum() / ld(h.shape[0])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|g_a - g_n| / max(|g_a|, |g_n|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERROR_FLOOR)


@dataclass
class GradCheckReport:
    tolerance: float
    order: int = 2
    epsilon: float = 1e-4
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple[int, ...]] | None = None
    worst_error: float = 0.0
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance

    def format(self) -> str:
        lines = [f"{name:<16} max rel err {err:.3e}" for name, err in self.max_rel_error.items()]
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        lines.append(
            f"{status}: worst {self.worst_error:.3e}{where} over {self.checked} coordinates "
            f"(order {self.order} differences, eps {self.epsilon:.0e}, tol {self.tolerance:.1e})"
        )
        return "\n".join(lines)


def gradcheck(
    model: Model,
    batch: np.ndarray,
    targets: np.ndarray,
    epsilon: float = 1e-4,
    tolerance: float = 1e-5,
    threshold: float = REL_ERROR_FLOOR,
    order: int = 2,
) -> GradCheckReport:
    """
    Compare backward() against central differences of the extended-precision
    loss on every trainable coordinate whose gradient magnitude exceeds
    `threshold`. The default is the two-point difference (f(p+e) - f(p-e)) / 2e;
    order=4 uses the five-point stencil.
    """
    named = trainable_tensors(model)
    analytic = dict(model_backward(model, batch, targets).items())

    def loss(arrays: list[np.ndarray]) -> np.longdouble:
        return extended_loss(with_tensors(model, arrays), batch, targets)

    numeric = numeric_gradient(loss, [a for _, a in named], epsilon, order=order)
    report = GradCheckReport(tolerance=tolerance, order=order, epsilon=epsilon)
    for (name, _), g_num in zip(named, numeric):
        g_an = analytic[name]
        significant = np.maximum(np.abs(g_an), np.abs(g_num)) > threshold
        rel = np.where(significant, relative_error(g_an, g_num), 0.0)
        report.checked += int(np.count_nonzero(significant))
        worst = float(rel.max()) if rel.size else 0.0
        report.max_rel_error[name] = worst
        if worst > report.worst_error or report.worst is None:
            idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
            report.worst = (name, tuple(int(i) for i in idx))
            report.worst_error = max(worst, report.worst_error)
    return report


def gradcheck_fixture(seed: int) -> tuple[Model, np.ndarray, np.ndarray]:
    """
    Seeded small network (1-3 hidden layers, widths <= 8, batch <= 8) with a
    random mix of LIN and LHUC attachments and soft targets.
    """
    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(1, 4))
    spec = NetworkSpec(
        input_dim=int(rng.integers(2, 7)),
        hidden_dims=tuple(int(d) for d in rng.integers(2, 9, size=n_hidden)),
        output_dim=int(rng.integers(2, 7)),
        hidden_activation=("sigmoid", "tanh")[seed % 2],
    )
    weights = tuple(rng.normal(scale=0.8, size=s) for s in spec.layer_shapes)
    biases = tuple(rng.normal(scale=0.3, size=s[1]) for s in spec.layer_shapes)
    params = NetworkParams(weights, biases, (True,) * spec.n_layers)
    lin = lhuc = None
    if seed % 3 != 1:
        d = spec.input_dim
        lin = LinParams(np.eye(d) + rng.normal(scale=0.2, size=(d, d)), rng.normal(scale=0.1, size=d))
    if seed % 3 != 2:
        lhuc = LhucParams(tuple(rng.normal(scale=0.5, size=h) for h in spec.hidden_dims))
    model = Model(spec, params, lin, lhuc)

    n = int(rng.integers(2, 9))
    batch = rng.normal(size=(n, spec.input_dim))
    logits = rng.normal(size=(n, spec.output_dim))
    targets = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return model, batch, targets
