"""Hybrid model: per-input branches, feature-wise concatenation, shared head.

A :class:`ModelConfig` declares named branches (each a stack of layers that
ends in a flat feature vector) and a head whose first layer is fully
connected. :func:`build_model` turns a config into a :class:`HybridModel`
holding named parameter arrays. Parameter names look like
``"branch/<name>/<layer>.<param>"`` and ``"head/<layer>.<param>"``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from hdnn.layers import (
    CacheReuseError,
    Dense,
    LayerCache,
    Mode,
    Sequential,
    concat_features,
    concat_features_backward,
    layer_from_spec,
)
from hdnn.optim import AdamState
from hdnn.tensor import RngStream, ShapeError

NUMERIC_MLP = "numeric_mlp"
SEQUENCE_CNN = "sequence_cnn"
BRANCH_KINDS = (NUMERIC_MLP, SEQUENCE_CNN)

# what a branch reads from a MixedDataset
BRANCH_INPUTS = {
    NUMERIC_MLP: ("attributes", "attributes+curve_means"),
    SEQUENCE_CNN: ("curves",),
}

REGRESSION = "regression"
CLASSIFICATION = "classification"


class ConfigError(ValueError):
    pass


def reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


@dataclass
class BranchSpec:
    name: str
    kind: str
    layers: list[dict]
    input_shape: tuple[int, ...] | None = None
    inputs: str | None = None

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ConfigError(f"branch {self.name!r}: kind must be one of {BRANCH_KINDS}, got {self.kind!r}")
        if self.inputs is None:
            self.inputs = BRANCH_INPUTS[self.kind][0]
        if self.inputs not in BRANCH_INPUTS[self.kind]:
            raise ConfigError(f"branch {self.name!r}: inputs must be one of {BRANCH_INPUTS[self.kind]}")
        if self.input_shape is not None:
            self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "inputs": self.inputs,
            "input_shape": list(self.input_shape) if self.input_shape is not None else None,
            "layers": self.layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BranchSpec":
        reject_unknown(d, {"name", "kind", "inputs", "input_shape", "layers"}, "branch")
        if "name" not in d or "kind" not in d:
            raise ConfigError("branch needs 'name' and 'kind'")
        return cls(d["name"], d["kind"], list(d.get("layers", [])), d.get("input_shape"), d.get("inputs"))


@dataclass
class HeadSpec:
    layers: list[dict]
    task: str = REGRESSION

    def __post_init__(self):
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"head task must be 'regression' or 'classification', got {self.task!r}")
        self.layers = [dict(layer) for layer in self.layers]
        if not self.layers:
            raise ConfigError("head needs at least one fully connected layer")
        if self.layers[0].get("type") != "dense" or self.layers[-1].get("type") != "dense":
            raise ConfigError("head must start and end with a dense layer")

    @property
    def output_width(self) -> int:
        return int(self.layers[-1]["units"])

    def to_dict(self) -> dict:
        return {"task": self.task, "layers": self.layers}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        reject_unknown(d, {"task", "layers"}, "head")
        return cls(list(d.get("layers", [])), d.get("task", REGRESSION))


@dataclass
class ModelConfig:
    branches: list[BranchSpec]
    head: HeadSpec
    seed: int = 0

    def __post_init__(self):
        if not self.branches:
            raise ConfigError("model needs at least one branch")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ConfigError(f"branch names must be unique, got {names}")
        for n in names:
            if not n or "/" in n:
                raise ConfigError(f"bad branch name {n!r}")

    def to_dict(self) -> dict:
        return {"branches": [b.to_dict() for b in self.branches], "head": self.head.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        reject_unknown(d, {"branches", "head", "seed"}, "model config")
        return cls(
            [BranchSpec.from_dict(b) for b in d.get("branches", [])],
            HeadSpec.from_dict(d["head"]),
            int(d.get("seed", 0)),
        )

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def branch(self, name: str) -> BranchSpec:
        for b in self.branches:
            if b.name == name:
                return b
        raise KeyError(name)


# ------------------------------------------------------------------ stock configs

def mlp_branch_layers(width: int = 32) -> list[dict]:
    return [{"type": "dense", "units": width}, {"type": "relu"},
            {"type": "dense", "units": width}, {"type": "relu"}]


def cnn_branch_layers() -> list[dict]:
    return [
        {"type": "conv1d", "filters": 16, "kernel": 5, "padding": "same"},
        {"type": "batch_norm"}, {"type": "relu"},
        {"type": "max_pool", "window": 2, "stride": 2},
        {"type": "conv1d", "filters": 32, "kernel": 5, "padding": "same"},
        {"type": "batch_norm"}, {"type": "relu"},
        {"type": "max_pool", "window": 2, "stride": 2},
        {"type": "conv1d", "filters": 64, "kernel": 3, "padding": "same"},
        {"type": "batch_norm"}, {"type": "relu"},
        {"type": "global_avg_pool"},
    ]


def head_layers(output_width: int = 1, dropout: float = 0.25) -> list[dict]:
    return [{"type": "dense", "units": 64}, {"type": "relu"},
            {"type": "dropout", "rate": dropout}, {"type": "dense", "units": output_width}]


PRESETS = ("hdnn", "cnn", "mlp")


def stock_config(
    preset: str = "hdnn",
    numeric_width: int | None = 4,
    channels: int = 7,
    length: int | None = 64,
    seed: int = 0,
) -> ModelConfig:
    """Default architectures: the hybrid model and its two single-branch baselines.

    ``mlp`` feeds the numeric attributes plus per-channel curve means to the
    numeric branch; its input width is ``numeric_width + channels``.
    """
    numeric = BranchSpec(
        "numeric", NUMERIC_MLP, mlp_branch_layers(),
        (numeric_width,) if numeric_width is not None else None, "attributes",
    )
    curves = BranchSpec(
        "curves", SEQUENCE_CNN, cnn_branch_layers(),
        (channels, length) if length is not None else None, "curves",
    )
    if preset == "hdnn":
        branches = [numeric, curves]
    elif preset == "cnn":
        branches = [curves]
    elif preset == "mlp":
        numeric.inputs = "attributes+curve_means"
        numeric.input_shape = (numeric_width + channels,) if numeric_width is not None else None
        branches = [numeric]
    else:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    return ModelConfig(branches, HeadSpec(head_layers()), seed)


# ------------------------------------------------------------------ model

class HybridModel:
    """Instantiated branches and head with their parameters.

    ``params`` and ``buffers`` are flat dicts of float64 arrays. ``normalizer``
    is attached by training and is needed for evaluation and prediction.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.branches: dict[str, Sequential] = {}
        for spec in config.branches:
            if spec.input_shape is None:
                raise ConfigError(f"branch {spec.name!r} has no input shape")
            layers = [layer_from_spec(s) for s in spec.layers]
            seq = Sequential(layers, spec.input_shape, prefix=f"branch/{spec.name}/")
            if len(seq.out_shape) != 1:
                raise ConfigError(
                    f"branch {spec.name!r} ends with per-sample shape {seq.out_shape}; "
                    "add a pooling or flatten layer so it emits a flat feature vector"
                )
            self.branches[spec.name] = seq
        self.feature_widths = [self.branches[b.name].out_shape[0] for b in config.branches]
        head_layers_ = [layer_from_spec(s) for s in config.head.layers]
        self.head = Sequential(head_layers_, (sum(self.feature_widths),), prefix="head/")
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.normalizer = None

    @property
    def branch_names(self) -> list[str]:
        return [b.name for b in self.config.branches]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for seq in self.branches.values():
            shapes.update(seq.param_shapes())
        shapes.update(self.head.param_shapes())
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for seq in list(self.branches.values()) + [self.head]:
            shapes.update({k: v.shape for k, v in seq.init_buffers().items()})
        return shapes

    def copy(self) -> "HybridModel":
        other = HybridModel(self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.normalizer = self.normalizer
        return other


def build_model(config: ModelConfig) -> HybridModel:
    """Instantiate ``config`` with He-normal weights drawn from ``config.seed``."""
    model = HybridModel(config)
    root = RngStream(config.seed).child("init")
    for spec in config.branches:
        seq = model.branches[spec.name]
        model.params.update(seq.init_params(root.child(f"branch/{spec.name}")))
        model.buffers.update(seq.init_buffers())
    model.params.update(model.head.init_params(root.child("head")))
    model.buffers.update(model.head.init_buffers())
    return model


def count_parameters(model: HybridModel) -> int:
    """Trainable scalars; batch-norm running statistics are not counted."""
    return int(sum(v.size for v in model.params.values()))


@dataclass
class ForwardCache:
    branch_caches: dict[str, list]
    concat_cache: LayerCache
    parts: list[np.ndarray]
    head_caches: list
    batch_size: int
    mode: Mode
    consumed: bool = field(default=False)


def _fused_first_dense(model: HybridModel, parts: list[np.ndarray]) -> np.ndarray:
    """First head layer applied to the concatenated branch features.

    Computed block-wise, one block per branch, and summed in branch-name order
    so the result does not depend on the order branches are listed in.
    """
    W = model.params["head/0.W"]
    b = model.params["head/0.b"]
    offsets = np.cumsum([0] + model.feature_widths)
    names = model.branch_names
    acc = None
    for i in sorted(range(len(parts)), key=lambda i: names[i]):
        block = parts[i] @ W[offsets[i]:offsets[i + 1]]
        acc = block if acc is None else acc + block
    return acc + b


def model_forward(
    model: HybridModel,
    inputs: dict[str, np.ndarray],
    mode: Mode = Mode.INFER,
    stream: RngStream | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run every branch, concatenate features, apply the head.

    ``inputs`` maps branch name to a batch ``[B, *input_shape]``. Returns
    predictions ``[B, output_width]`` and the cache for :func:`model_backward`.
    Train mode updates batch-norm running statistics and needs ``stream`` when
    the model has dropout.
    """
    missing = [n for n in model.branch_names if n not in inputs]
    if missing:
        raise ValueError(f"missing input for branch(es): {missing}")
    extra = sorted(set(inputs) - set(model.branch_names))
    if extra:
        raise ValueError(f"inputs given for unknown branch(es): {extra}")
    batch = None
    parts, branch_caches = [], {}
    for spec in model.config.branches:
        x = np.asarray(inputs[spec.name], dtype=np.float64)
        seq = model.branches[spec.name]
        if x.shape[1:] != seq.in_shape:
            raise ShapeError(f"branch {spec.name!r} expects per-sample shape {seq.in_shape}, got {x.shape[1:]}")
        if batch is None:
            batch = x.shape[0]
        elif x.shape[0] != batch:
            raise ShapeError(f"branch {spec.name!r} batch size {x.shape[0]} differs from {batch}")
        t, caches = seq.forward(model.params, model.buffers, x, mode, stream)
        parts.append(t)
        branch_caches[spec.name] = caches

    _, concat_cache = concat_features(parts)
    h = _fused_first_dense(model, parts)
    head_caches = [None]
    layers = model.head.layers
    for i in range(1, len(layers)):
        layer = layers[i]
        p = {n: model.params[model.head.key(i, n)] for n in layer.param_shapes()}
        buf = {n: model.buffers[model.head.key(i, n)] for n in layer.buffer_names}
        h, cache = layer.forward(p, buf, h, mode, stream)
        for n, v in buf.items():
            model.buffers[model.head.key(i, n)] = v
        head_caches.append(cache)
    return h, ForwardCache(branch_caches, concat_cache, parts, head_caches, batch, mode)


def model_backward(model: HybridModel, cache: ForwardCache, d_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss for every parameter, given dLoss/dPrediction."""
    if cache.consumed:
        raise CacheReuseError("model_backward already ran for this forward cache")
    cache.consumed = True
    d_pred = np.asarray(d_pred, dtype=np.float64)
    expected = (cache.batch_size, model.config.head.output_width)
    if d_pred.shape != expected:
        raise ShapeError(f"upstream gradient shape {d_pred.shape} != prediction shape {expected}")

    grads: dict[str, np.ndarray] = {}
    dh = d_pred
    layers = model.head.layers
    for i in reversed(range(1, len(layers))):
        layer = layers[i]
        p = {n: model.params[model.head.key(i, n)] for n in layer.param_shapes()}
        dh, g = layer.backward(p, dh, cache.head_caches[i])
        for n, v in g.items():
            grads[model.head.key(i, n)] = v

    W = model.params["head/0.W"]
    z = np.concatenate(cache.parts, axis=1)
    grads["head/0.W"] = z.T @ dh
    grads["head/0.b"] = dh.sum(axis=0)
    dz = dh @ W.T
    d_parts = concat_features_backward(dz, cache.concat_cache)

    for spec, dt in zip(model.config.branches, d_parts):
        seq = model.branches[spec.name]
        _, g = seq.backward(model.params, np.ascontiguousarray(dt), cache.branch_caches[spec.name])
        grads.update(g)
    return {k: grads[k] for k in model.params}


def predict_raw(model: HybridModel, inputs: dict[str, np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Infer-mode predictions in model units, evaluated in chunks."""
    n = next(iter(inputs.values())).shape[0]
    outs = []
    for start in range(0, n, batch_size):
        chunk = {k: v[start:start + batch_size] for k, v in inputs.items()}
        y, _ = model_forward(model, chunk, Mode.INFER)
        outs.append(y)
    if not outs:
        return np.zeros((0, model.config.head.output_width))
    return np.concatenate(outs, axis=0)


# ------------------------------------------------------------------ checkpoint

MAGIC = b"HDNN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(model: HybridModel, optimizer: AdamState | None = None) -> bytes:
    """Serialise the model (and optional optimiser state) to bytes.

    Layout: ``b"HDNN"``, u32 version, u32 header length, canonical JSON
    header, u32 record count, records of (u32 name length, name, u32 rank,
    u64 dims, little-endian float64 data), then a u64 checksum (BLAKE2b,
    8-byte digest) of everything before it. All integers little-endian.
    """
    header: dict[str, Any] = {"config": model.config.to_dict()}
    records: list[tuple[str, np.ndarray]] = []
    records += [(f"param/{k}", v) for k, v in model.params.items()]
    records += [(f"buffer/{k}", v) for k, v in model.buffers.items()]
    if optimizer is not None:
        header["optimizer"] = optimizer.hyperparameters()
        records += [(f"adam_m/{k}", v) for k, v in optimizer.m.items()]
        records += [(f"adam_v/{k}", v) for k, v in optimizer.v.items()]
    else:
        header["optimizer"] = None
    if model.normalizer is not None:
        meta, arrays = model.normalizer.to_state()
        header["normalizer"] = meta
        records += [(f"norm/{k}", v) for k, v in arrays.items()]
    else:
        header["normalizer"] = None

    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<Q", _checksum(body))


def save_checkpoint(model: HybridModel, optimizer: AdamState | None, path) -> None:
    data = checkpoint_bytes(model, optimizer)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_from_bytes(data: bytes) -> tuple[HybridModel, AdamState | None]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an HDNN checkpoint (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is newer than supported version {FORMAT_VERSION}")
    if len(data) < 8 + 4 + 4 + 8:
        raise CheckpointError("checkpoint is truncated")
    body, tail = data[:-8], data[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(body):
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt file)")

    r = _Reader(body)
    r.take(8)
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    records: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        records[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")

    model = HybridModel(ModelConfig.from_dict(header["config"]))
    expected = {f"param/{k}": s for k, s in model.param_shapes().items()}
    expected.update({f"buffer/{k}": s for k, s in model.buffer_shapes().items()})
    optimizer = None
    if header.get("optimizer") is not None:
        h = header["optimizer"]
        optimizer = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], t=h["t"])
    norm_arrays = {}
    for name, arr in records.items():
        prefix, _, key = name.partition("/")
        if name in expected:
            if arr.shape != tuple(expected[name]):
                raise CheckpointError(f"record {name!r} has shape {arr.shape}, expected {tuple(expected[name])}")
            (model.params if prefix == "param" else model.buffers)[key] = arr
        elif prefix in ("adam_m", "adam_v") and optimizer is not None and f"param/{key}" in expected:
            (optimizer.m if prefix == "adam_m" else optimizer.v)[key] = arr
        elif prefix == "norm" and header.get("normalizer") is not None:
            norm_arrays[key] = arr
        else:
            raise CheckpointError(f"unknown parameter record {name!r}")
    absent = sorted(set(expected) - set(records))
    if absent:
        raise CheckpointError(f"checkpoint lacks record(s): {absent}")
    model.params = {k: model.params[k] for k in model.param_shapes()}
    model.buffers = {k: model.buffers[k] for k in model.buffer_shapes()}
    if header.get("normalizer") is not None:
        from hdnn.data.normalize import Normalizer

        model.normalizer = Normalizer.from_state(header["normalizer"], norm_arrays)
    return model, optimizer


def load_checkpoint(path) -> tuple[HybridModel, AdamState | None]:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
