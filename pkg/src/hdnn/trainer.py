"""Mini-batch training, evaluation and prediction."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hdnn.data.normalize import Normalizer, fit_normalizer
from hdnn.data.preprocess import MixedDataset, split_dataset
from hdnn.layers import Mode
from hdnn.losses import Metrics, cross_entropy_loss, mse_loss
from hdnn.model import (
    CLASSIFICATION,
    NUMERIC_MLP,
    HybridModel,
    model_backward,
    model_forward,
    predict_raw,
)
from hdnn.optim import AdamState, adam_step
from hdnn.tensor import RngStream

log = logging.getLogger(__name__)


@dataclass
class TrainSpec:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    val_fraction: float = 0.2
    patience: int | None = 30
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"validation fraction must be in [0, 1), got {self.val_fraction}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1 or None, got {self.patience}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_mae"])
            for r in self.records:
                w.writerow([r.epoch, _num(r.train_loss), _num(r.val_loss), _num(r.val_mae)])


def _num(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def prepare_features(model: HybridModel, dataset: MixedDataset) -> MixedDataset:
    """Add derived features the model's branches ask for (curve means)."""
    if any(b.inputs == "attributes+curve_means" for b in model.config.branches):
        return dataset.with_curve_means()
    return dataset


def branch_inputs(model: HybridModel, dataset: MixedDataset) -> dict[str, np.ndarray]:
    return {
        b.name: dataset.numeric if b.kind == NUMERIC_MLP else dataset.curves
        for b in model.config.branches
    }


def _is_classifier(model: HybridModel) -> bool:
    return model.config.head.task == CLASSIFICATION


def _loss(model: HybridModel, pred: np.ndarray, target: np.ndarray):
    if _is_classifier(model):
        return cross_entropy_loss(pred, target.astype(np.int64))
    return mse_loss(pred, target.reshape(-1, 1))


def make_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks of ``order``; a trailing singleton joins the previous chunk."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train(
    model: HybridModel,
    dataset: MixedDataset,
    spec: TrainSpec,
    optimizer: AdamState | None = None,
) -> tuple[HybridModel, TrainHistory, AdamState]:
    """Fit ``model`` to ``dataset`` with Adam and return a trained copy.

    A validation split is carved from ``dataset`` when ``spec.val_fraction``
    is positive. Normalisation statistics come from the remaining training
    part and are attached to the returned model. With early stopping the
    returned parameters are those of the best validation epoch.
    """
    if dataset.labels is None:
        raise ValueError("training needs a labelled dataset")
    data = prepare_features(model, dataset)
    if spec.val_fraction > 0:
        fit, val = split_dataset(data, 1.0 - spec.val_fraction, spec.seed)
    else:
        fit, val = data, None
    if len(fit) == 0:
        raise ValueError("training split is empty")
    if val is not None and len(val) == 0:
        val = None

    normalizer = fit_normalizer(fit)
    model = model.copy()
    if _is_classifier(model):
        normalizer.label_mean, normalizer.label_std = 0.0, 1.0
    model.normalizer = normalizer
    nfit = normalizer.apply(fit)
    fit_x = branch_inputs(model, nfit)
    fit_y = nfit.labels
    if val is not None:
        nval = normalizer.apply(val)
        val_x = branch_inputs(model, nval)

    root = RngStream(spec.seed)
    shuffle = root.child("shuffle")
    drop = root.child("dropout")
    opt = optimizer if optimizer is not None else AdamState(lr=spec.lr)
    history = TrainHistory()
    best_loss, best_state, wait = math.inf, None, 0

    for epoch in range(1, spec.epochs + 1):
        total = 0.0
        for idx in make_batches(shuffle.permutation(len(fit)), spec.batch_size):
            xb = {k: v[idx] for k, v in fit_x.items()}
            pred, cache = model_forward(model, xb, Mode.TRAIN, drop)
            loss, dpred = _loss(model, pred, fit_y[idx])
            grads = model_backward(model, cache, dpred)
            adam_step(model.params, grads, opt)
            history.steps += 1
            total += loss * len(idx)
        train_loss = total / len(fit)

        val_loss = val_mae = math.nan
        if val is not None:
            vp = predict_raw(model, val_x)
            val_loss, _ = _loss(model, vp, nval.labels)
            if not _is_classifier(model):
                val_mae = float(np.mean(np.abs(normalizer.inverse_labels(vp[:, 0]) - val.labels)))
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_mae))
        log.debug("epoch %d train_loss=%.5f val_loss=%.5f", epoch, train_loss, val_loss)

        if spec.patience is not None and val is not None:
            if val_loss < best_loss:
                best_loss, wait = val_loss, 0
                history.best_epoch = epoch
                best_state = ({k: v.copy() for k, v in model.params.items()},
                              {k: v.copy() for k, v in model.buffers.items()})
            else:
                wait += 1
                if wait >= spec.patience:
                    break

    if best_state is not None:
        model.params, model.buffers = best_state
    return model, history, opt


def _require_normalizer(model: HybridModel) -> Normalizer:
    if model.normalizer is None:
        raise ValueError("model has no fitted normalizer; train it first")
    return model.normalizer


def predict_values(model: HybridModel, dataset: MixedDataset) -> np.ndarray:
    """Infer-mode predictions in label units (class index for classifiers)."""
    normalizer = _require_normalizer(model)
    data = normalizer.apply(prepare_features(model, dataset))
    out = predict_raw(model, branch_inputs(model, data))
    if _is_classifier(model):
        return out.argmax(axis=1).astype(np.float64)
    return normalizer.inverse_labels(out[:, 0])


def evaluate(model: HybridModel, dataset: MixedDataset) -> Metrics:
    if dataset.labels is None:
        raise ValueError("evaluation needs a labelled dataset")
    return Metrics.compute(predict_values(model, dataset), dataset.labels)


PREDICTION_COLUMNS = ("well_id", "formation_id", "predicted_production_t_per_d")
MEASURED_COLUMN = "measured_production_t_per_d"


@dataclass
class PredictionRow:
    well_id: str
    formation_id: str
    predicted: float
    measured: float | None = None


@dataclass
class PredictionSet:
    rows: list[PredictionRow]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def has_measured(self) -> bool:
        return any(r.measured is not None for r in self.rows)

    def write_csv(self, path) -> None:
        header = list(PREDICTION_COLUMNS) + ([MEASURED_COLUMN] if self.has_measured else [])
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                row = [r.well_id, r.formation_id, repr(float(r.predicted))]
                if self.has_measured:
                    row.append("" if r.measured is None else repr(float(r.measured)))
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "PredictionSet":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header[:3]) != PREDICTION_COLUMNS or header[3:] not in ([], [MEASURED_COLUMN]):
                raise ValueError(f"{path}:1: bad prediction header {header}")
            rows = []
            for row in reader:
                if len(row) != len(header):
                    raise ValueError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
                try:
                    measured = float(row[3]) if len(row) > 3 and row[3] != "" else None
                    rows.append(PredictionRow(row[0], row[1], float(row[2]), measured))
                except ValueError as exc:
                    raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
        return cls(rows)


def predict(model: HybridModel, dataset: MixedDataset) -> PredictionSet:
    """One prediction per instance, in input order; measured values echoed when known."""
    values = predict_values(model, dataset)
    measured = dataset.labels if dataset.labels is not None else [None] * len(dataset)
    return PredictionSet([
        PredictionRow(w, f, float(v), None if m is None else float(m))
        for (w, f), v, m in zip(dataset.keys, values, measured)
    ])
