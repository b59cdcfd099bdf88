"""Finite-difference gradient checks for every layer and a small hybrid model.

Each case builds a scalar loss ``sum(output * R)`` for a fixed random ``R``,
compares the analytic gradients of every input and parameter against
central differences, and reports the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from hdnn import layers as L
from hdnn.layers import Mode
from hdnn.losses import cross_entropy_loss, mse_loss
from hdnn.model import BranchSpec, HeadSpec, ModelConfig, build_model, model_backward, model_forward
from hdnn.tensor import RngStream

STEP = 1e-5
TOLERANCE = 1e-4
# Denominator floor. Gradients that are exactly zero (e.g. a conv bias feeding
# batch norm) come back from central differences as ~1e-11 roundoff.
FLOOR = 1e-6


@dataclass
class CaseResult:
    case: str
    max_rel_error: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.case:<28} max_rel_err={self.max_rel_error:.3e}"


@dataclass
class GradcheckReport:
    seed: int
    results: list[CaseResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[str]:
        return [r.case for r in self.results if not r.passed]

    def text(self) -> str:
        lines = [f"gradcheck seed={self.seed}"] + [r.line() for r in self.results]
        lines.append(f"{'ALL PASS' if self.passed else 'FAILED: ' + ', '.join(self.failures())}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_function(forward, backward, tensors: dict[str, np.ndarray], rng: RngStream) -> float:
    """Worst relative error over all tensors for a forward/backward pair.

    ``forward(**tensors)`` returns ``(y, cache)``; ``backward(dy, cache)``
    returns ``(dx, grads)`` where ``dx`` is the gradient of the first tensor
    and ``grads`` maps the remaining tensor names to their gradients.
    """
    y, _ = forward(**tensors)
    R = rng.normal(y.shape)

    def loss() -> float:
        return float(np.sum(forward(**tensors)[0] * R))

    y, cache = forward(**tensors)
    dx, grads = backward(R.copy(), cache)
    names = list(tensors)
    analytic = {names[0]: dx, **grads}
    worst = 0.0
    for name in names:
        if name not in analytic:
            continue
        num = numeric_gradient(loss, tensors[name])
        worst = max(worst, relative_error(analytic[name], num))
    return worst


def _away_from_zero(rng: RngStream, shape, margin: float = 1e-3) -> np.ndarray:
    while True:
        x = rng.normal(shape)
        if np.all(np.abs(x) >= margin):
            return x


def _distinct_windows(rng: RngStream, shape, window: int, stride: int, margin: float = 1e-3) -> np.ndarray:
    while True:
        x = rng.normal(shape)
        win = np.lib.stride_tricks.sliding_window_view(x, window, axis=2)[:, :, ::stride, :]
        top2 = np.sort(win, axis=3)[..., -2:]
        if np.all(top2[..., 1] - top2[..., 0] >= margin):
            return x


# name -> (forward, backward); the tests swap entries to check the suite notices
LAYER_OPS = {
    "fully_connected": (L.fc_forward, L.fc_backward),
    "conv1d": (L.conv1d_forward, L.conv1d_backward),
    "relu": (L.relu_forward, L.relu_backward),
    "batch_norm": (L.batch_norm_forward, L.batch_norm_backward),
    "dropout": (L.dropout_forward, L.dropout_backward),
    "max_pool1d": (L.max_pool1d_forward, L.max_pool1d_backward),
    "global_avg_pool": (L.global_avg_pool_forward, L.global_avg_pool_backward),
    "concat_features": (L.concat_features, L.concat_features_backward),
}


def _layer_cases(rng: RngStream, ops) -> list[tuple[str, float]]:
    out = []

    fwd, bwd = ops["fully_connected"]
    B, d_in, d_out = (int(v) for v in rng.integers(1, 6, size=3))
    out.append(("fully_connected", check_function(
        fwd, bwd, {"x": rng.normal((B, d_in)), "W": rng.normal((d_in, d_out)), "b": rng.normal(d_out)}, rng)))

    fwd, bwd = ops["conv1d"]
    for stride, padding in ((1, 1), (2, 0), (2, 2)):
        B, C, O = (int(v) for v in rng.integers(1, 4, size=3))
        k = int(rng.integers(1, 4))
        length = int(rng.integers(k, k + 6))
        tensors = {"x": rng.normal((B, C, length)), "K": rng.normal((O, C, k)), "b": rng.normal(O)}
        err = check_function(lambda x, K, b: fwd(x, K, b, stride, padding), bwd, tensors, rng)
        out.append((f"conv1d[s={stride},p={padding}]", err))

    fwd, bwd = ops["relu"]
    out.append(("relu", check_function(fwd, bwd, {"x": _away_from_zero(rng, (3, 5))}, rng)))

    fwd, bwd = ops["batch_norm"]
    for label, shape, mode in (("batch_norm[BF,train]", (5, 3), Mode.TRAIN),
                               ("batch_norm[BCL,train]", (3, 2, 4), Mode.TRAIN),
                               ("batch_norm[BF,infer]", (4, 3), Mode.INFER)):
        n = shape[1]
        rm, rv = rng.normal(n), 0.5 + rng.uniform(n)

        def bn(x, gamma, beta, _mode=mode, _rm=rm, _rv=rv):
            y, cache, _ = fwd(x, gamma, beta, _rm, _rv, 0.1, 1e-5, _mode)
            return y, cache

        tensors = {"x": rng.normal(shape) * 2 + 1, "gamma": rng.normal(n), "beta": rng.normal(n)}
        out.append((label, check_function(bn, bwd, tensors, rng)))

    fwd, bwd = ops["dropout"]
    mask_seed = int(rng.integers(0, 2**31))
    out.append(("dropout", check_function(
        lambda x: fwd(x, 0.4, RngStream(mask_seed), Mode.TRAIN), bwd, {"x": rng.normal((4, 6))}, rng)))

    fwd, bwd = ops["max_pool1d"]
    for window, stride in ((2, 2), (3, 1)):
        x = _distinct_windows(rng, (2, 3, 7), window, stride)
        out.append((f"max_pool1d[w={window},s={stride}]",
                    check_function(lambda x: fwd(x, window, stride), bwd, {"x": x}, rng)))

    fwd, bwd = ops["global_avg_pool"]
    out.append(("global_avg_pool", check_function(fwd, bwd, {"x": rng.normal((2, 3, 5))}, rng)))

    fwd, bwd = ops["concat_features"]

    def concat_pair(a, b):
        return fwd([a, b])

    def concat_back(dz, cache):
        da, db = bwd(dz, cache)
        return da, {"b": db}

    out.append(("concat_features", check_function(
        concat_pair, concat_back, {"a": rng.normal((3, 2)), "b": rng.normal((3, 4))}, rng)))
    return out


def _loss_cases(rng: RngStream) -> list[tuple[str, float]]:
    pred, target = rng.normal(6), rng.normal(6)
    _, g = mse_loss(pred, target)
    num = numeric_gradient(lambda: mse_loss(pred, target)[0], pred)
    out = [("mse_loss", relative_error(g, num))]
    logits = rng.normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    _, g = cross_entropy_loss(logits, labels)
    num = numeric_gradient(lambda: cross_entropy_loss(logits, labels)[0], logits)
    out.append(("cross_entropy_loss", relative_error(g, num)))
    return out


def small_model_config(seed: int) -> ModelConfig:
    """Two-branch model exercising every layer type, a few hundred parameters."""
    numeric = BranchSpec("numeric", "numeric_mlp",
                         [{"type": "dense", "units": 5}, {"type": "relu"}, {"type": "dense", "units": 4},
                          {"type": "relu"}], (3,))
    curves = BranchSpec("curves", "sequence_cnn",
                        [{"type": "conv1d", "filters": 3, "kernel": 3, "padding": "same"},
                         {"type": "batch_norm"}, {"type": "relu"},
                         {"type": "max_pool", "window": 2, "stride": 2},
                         {"type": "conv1d", "filters": 4, "kernel": 3, "stride": 2, "padding": 1},
                         {"type": "batch_norm"}, {"type": "relu"},
                         {"type": "global_avg_pool"}], (2, 8))
    head = HeadSpec([{"type": "dense", "units": 6}, {"type": "relu"}, {"type": "dropout", "rate": 0.3},
                     {"type": "dense", "units": 1}])
    return ModelConfig([numeric, curves], head, seed)


def check_model(seed: int) -> float:
    """Worst relative error of all parameter gradients of the small model."""
    rng = RngStream(seed).child("gradcheck-model")
    model = build_model(small_model_config(seed))
    # non-trivial batch-norm affine parameters
    for k in model.params:
        if k.endswith(".gamma"):
            model.params[k] = 1.0 + 0.5 * rng.normal(model.params[k].shape)
        elif k.endswith(".beta") or k.endswith(".b"):
            model.params[k] = 0.3 * rng.normal(model.params[k].shape)
    inputs = {"numeric": rng.normal((5, 3)), "curves": rng.normal((5, 2, 8))}
    target = rng.normal((5, 1))
    mask_seed = int(rng.integers(0, 2**31))
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def loss() -> float:
        model.buffers = {k: v.copy() for k, v in buffers.items()}
        pred, _ = model_forward(model, inputs, Mode.TRAIN, RngStream(mask_seed))
        return mse_loss(pred, target)[0]

    model.buffers = {k: v.copy() for k, v in buffers.items()}
    pred, cache = model_forward(model, inputs, Mode.TRAIN, RngStream(mask_seed))
    _, dpred = mse_loss(pred, target)
    grads = model_backward(model, cache, dpred)
    worst = 0.0
    for name, p in model.params.items():
        worst = max(worst, relative_error(grads[name], numeric_gradient(loss, p)))
    return worst


def gradcheck_suite(seed: int = 0, overrides: dict | None = None, tolerance: float = TOLERANCE) -> GradcheckReport:
    """Run every layer, loss and whole-model check for one seed.

    ``overrides`` replaces entries of :data:`LAYER_OPS` for the layer-level
    cases only.
    """
    ops = dict(LAYER_OPS)
    ops.update(overrides or {})
    rng = RngStream(seed).child("gradcheck")
    cases = _layer_cases(rng, ops) + _loss_cases(rng)
    cases.append(("hybrid_model", check_model(seed)))
    return GradcheckReport(seed, [CaseResult(name, err, bool(err < tolerance)) for name, err in cases])
