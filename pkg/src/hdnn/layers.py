"""Layer primitives with explicit forward and backward passes.

Every primitive comes as a ``*_forward`` / ``*_backward`` pair. Forward
returns the output and a :class:`LayerCache`; backward takes the upstream
gradient and that cache and returns the input gradient plus a dict of
parameter gradients. A cache can be consumed by exactly one backward call.

The layer classes at the bottom wrap the primitives with hyperparameters and
parameter naming so that :mod:`hdnn.model` can stack them.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from hdnn.tensor import RngStream, ShapeError


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


class CacheReuseError(RuntimeError):
    pass


class LayerCache(dict):
    """Forward-pass values kept for a single backward pass."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.consumed = False

    def consume(self) -> "LayerCache":
        if self.consumed:
            raise CacheReuseError("backward already ran for this forward cache")
        self.consumed = True
        return self


# ---------------------------------------------------------------- fully connected

def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"fully_connected expects x[B,d_in], W[d_in,d_out], b[d_out]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"fully_connected dimension mismatch: {x.shape}, {W.shape}, {b.shape}")
    y = x @ W + b
    return y, LayerCache(x=x, W=W)


def fc_backward(dy: np.ndarray, cache: LayerCache):
    c = cache.consume()
    x, W = c["x"], c["W"]
    return dy @ W.T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


# ---------------------------------------------------------------- conv1d

def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if kernel > length + 2 * padding:
        raise ShapeError(f"kernel {kernel} larger than padded input {length + 2 * padding}")
    return (length + 2 * padding - kernel) // stride + 1


def conv1d_forward(x: np.ndarray, K: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation over the last axis with zero padding.

    Each output is accumulated sequentially over input channels and, inside
    each channel, over kernel taps; the bias is added last. That order is
    fixed so results are reproducible bit-for-bit.
    """
    if x.ndim != 3 or K.ndim != 3 or b.ndim != 1:
        raise ShapeError(f"conv1d expects x[B,C,L], K[O,C,k], b[O]; got {x.shape}, {K.shape}, {b.shape}")
    B, C, L = x.shape
    O, C_k, k = K.shape
    if C_k != C or b.shape[0] != O:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape}, K {K.shape}, b {b.shape}")
    L_out = conv1d_output_length(L, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    span = stride * (L_out - 1) + 1
    out = np.zeros((B, O, L_out))
    for c in range(C):
        for j in range(k):
            out += xp[:, None, c, j:j + span:stride] * K[None, :, c, j, None]
    out += b[None, :, None]
    return out, LayerCache(xp=xp, K=K, stride=stride, padding=padding, L=L)


def conv1d_backward(dy: np.ndarray, cache: LayerCache):
    c = cache.consume()
    xp, K, stride, padding, L = c["xp"], c["K"], c["stride"], c["padding"], c["L"]
    k = K.shape[2]
    L_out = dy.shape[2]
    span = stride * (L_out - 1) + 1
    dK = np.empty_like(K)
    dxp = np.zeros_like(xp)
    for j in range(k):
        cols = xp[:, :, j:j + span:stride]
        dK[:, :, j] = np.tensordot(dy, cols, axes=([0, 2], [0, 2]))
        dxp[:, :, j:j + span:stride] += np.matmul(K[:, :, j].T, dy)
    dx = dxp[:, :, padding:padding + L]
    return np.ascontiguousarray(dx), {"K": dK, "b": dy.sum(axis=(0, 2))}


# ---------------------------------------------------------------- relu

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), LayerCache(mask=x > 0)


def relu_backward(dy: np.ndarray, cache: LayerCache):
    # gradient at exactly zero is zero
    return dy * cache.consume()["mask"], {}


# ---------------------------------------------------------------- batch norm

def _bn_axes(x: np.ndarray):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 3:
        return (0, 2), (1, -1, 1)
    raise ShapeError(f"batch_norm expects [B,F] or [B,C,L], got {x.shape}")


def batch_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-5,
    mode: Mode = Mode.TRAIN,
):
    """Batch normalisation over the batch axis (and length, for [B,C,L]).

    Returns ``(y, cache, (new_running_mean, new_running_var))``. Running
    statistics only change in train mode.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    axes, bshape = _bn_axes(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    g = gamma.reshape(bshape)
    if mode is Mode.TRAIN:
        if count < 2:
            raise ValueError(f"train-mode batch_norm needs at least 2 values per feature, got {count}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_stats = (
            (1 - momentum) * running_mean + momentum * mean,
            (1 - momentum) * running_var + momentum * var,
        )
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = g * xhat + beta.reshape(bshape)
    cache = LayerCache(xhat=xhat, inv_std=inv_std, gamma=gamma, axes=axes, bshape=bshape, count=count, mode=mode)
    return y, cache, new_stats


def batch_norm_backward(dy: np.ndarray, cache: LayerCache):
    c = cache.consume()
    xhat, inv_std, axes, bshape, n = c["xhat"], c["inv_std"], c["axes"], c["bshape"], c["count"]
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    scale = (c["gamma"] * inv_std).reshape(bshape)
    if c["mode"] is Mode.INFER:
        dx = dy * scale
    else:
        dx = scale / n * (n * dy - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
    return dx, {"gamma": dgamma, "beta": dbeta}


# ---------------------------------------------------------------- dropout

def dropout_forward(x: np.ndarray, rate: float, stream: RngStream | None, mode: Mode):
    """Inverted dropout: kept units are scaled by ``1/(1-rate)`` at train time."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode is Mode.INFER or rate == 0:
        return x.copy(), LayerCache(mask=None)
    if stream is None:
        raise ValueError("train-mode dropout needs a random stream")
    keep = stream.uniform(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, LayerCache(mask=mask)


def dropout_backward(dy: np.ndarray, cache: LayerCache):
    mask = cache.consume()["mask"]
    return (dy.copy() if mask is None else dy * mask), {}


# ---------------------------------------------------------------- pooling

def max_pool1d_output_length(length: int, window: int, stride: int) -> int:
    if stride < 1 or window < 1:
        raise ValueError("window and stride must be >= 1")
    if window > length:
        raise ShapeError(f"pool window {window} larger than input length {length}")
    return (length - window) // stride + 1


def max_pool1d_forward(x: np.ndarray, window: int, stride: int):
    if x.ndim != 3:
        raise ShapeError(f"max_pool1d expects [B,C,L], got {x.shape}")
    L = x.shape[2]
    L_out = max_pool1d_output_length(L, window, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, window, axis=2)[:, :, : stride * (L_out - 1) + 1 : stride, :]
    # argmax picks the first maximum, i.e. the lowest index on ties
    arg = win.argmax(axis=3)
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    pos = arg + (np.arange(L_out) * stride)[None, None, :]
    return np.ascontiguousarray(y), LayerCache(pos=pos, L=L)


def max_pool1d_backward(dy: np.ndarray, cache: LayerCache):
    c = cache.consume()
    pos, L = c["pos"], c["L"]
    B, C, _ = dy.shape
    dx = np.zeros((B, C, L))
    bi = np.arange(B)[:, None, None]
    ci = np.arange(C)[None, :, None]
    np.add.at(dx, (bi, ci, pos), dy)
    return dx, {}


def global_avg_pool_forward(x: np.ndarray):
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [B,C,L], got {x.shape}")
    return x.mean(axis=2), LayerCache(L=x.shape[2])


def global_avg_pool_backward(dy: np.ndarray, cache: LayerCache):
    L = cache.consume()["L"]
    return np.repeat(dy[:, :, None] / L, L, axis=2), {}


# ---------------------------------------------------------------- concat

def concat_features(parts: Sequence[np.ndarray]):
    """Feature-wise concatenation of ``[B, d_i]`` blocks in list order."""
    if not parts:
        raise ValueError("concat_features needs at least one part")
    B = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2:
            raise ShapeError(f"concat parts must be [B, d], got {p.shape}")
        if p.shape[0] != B:
            raise ShapeError(f"batch sizes differ: {[q.shape[0] for q in parts]}")
    return np.concatenate(parts, axis=1), LayerCache(widths=[p.shape[1] for p in parts])


def concat_features_backward(dz: np.ndarray, cache: LayerCache) -> list[np.ndarray]:
    widths = cache.consume()["widths"]
    bounds = np.cumsum([0] + widths)
    return [dz[:, bounds[i]:bounds[i + 1]] for i in range(len(widths))]


# ---------------------------------------------------------------- layer objects

class Layer:
    """Base class: a layer knows its parameter shapes and input/output shapes."""

    kind = "layer"

    def build(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out_shape(self.in_shape)
        return self.out_shape

    def _out_shape(self, in_shape):
        return in_shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, stream: RngStream) -> dict[str, np.ndarray]:
        return {}

    buffer_names: tuple[str, ...] = ()

    def buffer_init(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, params, buffers, x, mode, stream):
        raise NotImplementedError

    def backward(self, params, dy, cache):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        if units < 1:
            raise ValueError(f"dense units must be >= 1, got {units}")
        self.units = int(units)

    def _out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs flat input, got per-sample shape {in_shape}")
        return (self.units,)

    def param_shapes(self):
        return {"W": (self.in_shape[0], self.units), "b": (self.units,)}

    def init_params(self, stream):
        fan_in = self.in_shape[0]
        return {
            "W": stream.normal((fan_in, self.units), 0.0, np.sqrt(2.0 / fan_in)),
            "b": np.zeros(self.units),
        }

    def forward(self, params, buffers, x, mode, stream):
        return fc_forward(x, params["W"], params["b"])

    def backward(self, params, dy, cache):
        return fc_backward(dy, cache)

    def spec(self):
        return {"type": self.kind, "units": self.units}


class Conv1D(Layer):
    kind = "conv1d"

    def __init__(self, filters: int, kernel: int, stride: int = 1, padding: int | str = "same"):
        if filters < 1 or kernel < 1:
            raise ValueError("conv1d filters and kernel must be >= 1")
        if stride < 1:
            raise ValueError(f"conv1d stride must be >= 1, got {stride}")
        if padding == "same":
            if stride != 1 or kernel % 2 == 0:
                raise ValueError("'same' padding needs stride 1 and an odd kernel")
            pad = (kernel - 1) // 2
        elif padding == "valid":
            pad = 0
        else:
            pad = int(padding)
        self.filters, self.kernel, self.stride = int(filters), int(kernel), int(stride)
        self.padding_spec = padding
        self.padding = pad

    def _out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"conv1d needs [C, L] per-sample input, got {in_shape}")
        return (self.filters, conv1d_output_length(in_shape[1], self.kernel, self.stride, self.padding))

    def param_shapes(self):
        return {"K": (self.filters, self.in_shape[0], self.kernel), "b": (self.filters,)}

    def init_params(self, stream):
        fan_in = self.in_shape[0] * self.kernel
        return {
            "K": stream.normal(self.param_shapes()["K"], 0.0, np.sqrt(2.0 / fan_in)),
            "b": np.zeros(self.filters),
        }

    def forward(self, params, buffers, x, mode, stream):
        return conv1d_forward(x, params["K"], params["b"], self.stride, self.padding)

    def backward(self, params, dy, cache):
        return conv1d_backward(dy, cache)

    def spec(self):
        return {"type": self.kind, "filters": self.filters, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding_spec}


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, buffers, x, mode, stream):
        return relu_forward(x)

    def backward(self, params, dy, cache):
        return relu_backward(dy, cache)


class BatchNorm(Layer):
    kind = "batch_norm"
    buffer_names = ("running_mean", "running_var")

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError(f"eps must be > 0, got {eps}")
        if not 0 <= momentum <= 1:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum, self.eps = float(momentum), float(eps)

    def _features(self):
        return self.in_shape[0]

    def param_shapes(self):
        return {"gamma": (self._features(),), "beta": (self._features(),)}

    def init_params(self, stream):
        n = self._features()
        return {"gamma": np.ones(n), "beta": np.zeros(n)}

    def buffer_init(self):
        n = self._features()
        return {"running_mean": np.zeros(n), "running_var": np.ones(n)}

    def forward(self, params, buffers, x, mode, stream):
        y, cache, (rm, rv) = batch_norm_forward(
            x, params["gamma"], params["beta"], buffers["running_mean"], buffers["running_var"],
            self.momentum, self.eps, mode,
        )
        if mode is Mode.TRAIN:
            buffers["running_mean"] = rm
            buffers["running_var"] = rv
        return y, cache

    def backward(self, params, dy, cache):
        return batch_norm_backward(dy, cache)

    def spec(self):
        return {"type": self.kind, "momentum": self.momentum, "eps": self.eps}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.25):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, params, buffers, x, mode, stream):
        return dropout_forward(x, self.rate, stream, mode)

    def backward(self, params, dy, cache):
        return dropout_backward(dy, cache)

    def spec(self):
        return {"type": self.kind, "rate": self.rate}


class MaxPool1D(Layer):
    kind = "max_pool"

    def __init__(self, window: int = 2, stride: int | None = None):
        self.window = int(window)
        self.stride = int(stride if stride is not None else window)

    def _out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"max_pool needs [C, L] per-sample input, got {in_shape}")
        return (in_shape[0], max_pool1d_output_length(in_shape[1], self.window, self.stride))

    def forward(self, params, buffers, x, mode, stream):
        return max_pool1d_forward(x, self.window, self.stride)

    def backward(self, params, dy, cache):
        return max_pool1d_backward(dy, cache)

    def spec(self):
        return {"type": self.kind, "window": self.window, "stride": self.stride}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def _out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"global_avg_pool needs [C, L] per-sample input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, params, buffers, x, mode, stream):
        return global_avg_pool_forward(x)

    def backward(self, params, dy, cache):
        return global_avg_pool_backward(dy, cache)


class Flatten(Layer):
    kind = "flatten"

    def _out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, buffers, x, mode, stream):
        return x.reshape(x.shape[0], -1), LayerCache(shape=x.shape)

    def backward(self, params, dy, cache):
        return dy.reshape(cache.consume()["shape"]), {}


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Dense, Conv1D, ReLU, BatchNorm, Dropout, MaxPool1D, GlobalAvgPool, Flatten)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}; expected one of {sorted(LAYER_TYPES)}")
    try:
        return LAYER_TYPES[kind](**spec)
    except TypeError as exc:
        raise ValueError(f"bad options for {kind} layer: {exc}") from None


class Sequential:
    """A stack of layers sharing one parameter namespace.

    Parameters live in a flat dict keyed ``"{prefix}{index}.{name}"``.
    """

    def __init__(self, layers: Sequence[Layer], in_shape: Sequence[int], prefix: str = ""):
        self.layers = list(layers)
        self.prefix = prefix
        self.in_shape = tuple(in_shape)
        shape = self.in_shape
        for layer in self.layers:
            shape = layer.build(shape)
        self.out_shape = shape

    def key(self, i: int, name: str) -> str:
        return f"{self.prefix}{i}.{name}"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {self.key(i, n): s for i, layer in enumerate(self.layers) for n, s in layer.param_shapes().items()}

    def init_params(self, stream: RngStream) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            for n, v in layer.init_params(stream).items():
                params[self.key(i, n)] = v
        return params

    def init_buffers(self) -> dict[str, np.ndarray]:
        return {self.key(i, n): v for i, layer in enumerate(self.layers) for n, v in layer.buffer_init().items()}

    def _local(self, table, i, layer, names):
        return {n: table[self.key(i, n)] for n in names}

    def forward(self, params, buffers, x, mode: Mode, stream: RngStream | None = None):
        caches = []
        for i, layer in enumerate(self.layers):
            p = self._local(params, i, layer, layer.param_shapes())
            buf = self._local(buffers, i, layer, layer.buffer_names)
            x, cache = layer.forward(p, buf, x, mode, stream)
            for n, v in buf.items():
                buffers[self.key(i, n)] = v
            caches.append(cache)
        return x, caches

    def backward(self, params, dy, caches):
        grads = {}
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            p = self._local(params, i, layer, layer.param_shapes())
            dy, g = layer.backward(p, dy, caches[i])
            for n, v in g.items():
                grads[self.key(i, n)] = v
        return dy, grads
