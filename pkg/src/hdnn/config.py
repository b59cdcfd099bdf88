"""JSON run configuration: model architecture, training settings, pipeline options.

Example::

    {
      "preset": "hdnn",
      "seed": 0,
      "resample_length": 64,
      "train": {"epochs": 200, "batch_size": 16, "lr": 0.001,
                "val_fraction": 0.2, "patience": 30, "seed": 0}
    }

Instead of ``preset`` a config may give ``branches`` (and optionally
``head``) explicitly, using the same layout as the model config stored in a
checkpoint. Unknown keys are rejected. An empty file means all defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from hdnn.data.preprocess import DEFAULT_LENGTH
from hdnn.model import (
    PRESETS,
    BranchSpec,
    ConfigError,
    HeadSpec,
    ModelConfig,
    reject_unknown,
    head_layers,
    stock_config,
)
from hdnn.trainer import TrainSpec

TOP_LEVEL_KEYS = {"preset", "branches", "head", "seed", "train", "resample_length", "data"}
DATA_KEYS = {"train", "eval", "predict"}


@dataclass
class PipelineOptions:
    resample_length: int = DEFAULT_LENGTH
    train_dir: str | None = None
    eval_dir: str | None = None
    predict_dir: str | None = None


def config_from_dict(raw: dict) -> tuple[ModelConfig, TrainSpec, PipelineOptions]:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    reject_unknown(raw, TOP_LEVEL_KEYS, "config")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    if "preset" in raw and "branches" in raw:
        raise ConfigError("give either 'preset' or an explicit 'branches' list, not both")
    if "branches" in raw:
        if not isinstance(raw["branches"], list):
            raise ConfigError("'branches' must be a list")
        branches = [BranchSpec.from_dict(b) for b in raw["branches"]]
        head = HeadSpec.from_dict(raw["head"]) if "head" in raw else HeadSpec(head_layers())
        model = ModelConfig(branches, head, seed)
    else:
        preset = raw.get("preset", "hdnn")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
        model = stock_config(preset, numeric_width=None, length=None, seed=seed)
        if "head" in raw:
            model.head = HeadSpec.from_dict(raw["head"])

    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("'train' must be an object")
    reject_unknown(train_raw, {f.name for f in fields(TrainSpec)}, "train")
    train_raw = dict(train_raw)
    train_raw.setdefault("seed", seed)
    try:
        spec = TrainSpec(**train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from None

    length = raw.get("resample_length", DEFAULT_LENGTH)
    if not isinstance(length, int) or length < 2:
        raise ConfigError(f"resample_length must be an integer >= 2, got {length!r}")
    data = raw.get("data", {})
    if not isinstance(data, dict):
        raise ConfigError("'data' must be an object")
    reject_unknown(data, DATA_KEYS, "data")
    opts = PipelineOptions(length, data.get("train"), data.get("eval"), data.get("predict"))
    return model, spec, opts


def parse_config(path) -> tuple[ModelConfig, TrainSpec, PipelineOptions]:
    """Read and validate a JSON config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return config_from_dict({})
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return config_from_dict(raw)


def resolve_input_shapes(config: ModelConfig, numeric_width: int, channels: int, length: int) -> ModelConfig:
    """Fill in branch input shapes left open in the config from the data."""
    branches = []
    for b in config.branches:
        if b.kind == "numeric_mlp":
            width = numeric_width + (channels if b.inputs == "attributes+curve_means" else 0)
            shape = (width,)
        else:
            shape = (channels, length)
        if b.input_shape is not None and tuple(b.input_shape) != shape:
            raise ConfigError(f"branch {b.name!r} declares input shape {b.input_shape} but the data gives {shape}")
        branches.append(BranchSpec(b.name, b.kind, b.layers, shape, b.inputs))
    return ModelConfig(branches, config.head, config.seed)
