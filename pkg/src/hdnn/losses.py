"""Training losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {target.size} targets")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, target


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``.

    The gradient has the shape of ``pred`` as given.
    """
    shape = np.shape(pred)
    p, t = _check_pair(pred, target)
    r = p - t
    m = r.size
    return float(np.dot(r, r) / m), (2.0 * r / m).reshape(shape)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_logits(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [M, C], got {logits.shape}")
    m, c = logits.shape
    if m == 0:
        raise ValueError("empty input")
    if labels.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("class labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    return logits, labels


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over instances, with gradient w.r.t. logits.

    The summed form is ``M * loss``; see :func:`cross_entropy_sum`.
    """
    logits, labels = _check_logits(logits, labels)
    m = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(m), labels]
    p = _softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(m), labels] = 1.0
    return float(nll.sum() / m), (p - onehot) / m


def cross_entropy_sum(logits: np.ndarray, labels: np.ndarray) -> float:
    """Cross-entropy summed over instances (no averaging)."""
    logits, labels = _check_logits(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float((log_norm - z[np.arange(logits.shape[0]), labels]).sum())


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _check_pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def r_squared(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared Pearson correlation between ``pred`` and ``target``.

    This is not the coefficient of determination: it ignores scale and sign,
    so an anti-correlated predictor scores 1. Returns 0 when either side has
    zero variance.
    """
    p, t = _check_pair(pred, target)
    if p.size < 2:
        raise ValueError("r_squared needs at least 2 values")
    # test constancy directly: the mean of a constant vector can be off by an ulp
    if np.ptp(p) == 0 or np.ptp(t) == 0:
        return 0.0
    dp = p - p.mean()
    dt = t - t.mean()
    sp = np.dot(dp, dp)
    st = np.dot(dt, dt)
    r2 = np.dot(dp, dt) ** 2 / (sp * st)
    return float(min(r2, 1.0))


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    r_squared: float
    count: int

    @classmethod
    def compute(cls, pred, target) -> "Metrics":
        p, t = _check_pair(pred, target)
        r = p - t
        r2 = r_squared(p, t) if p.size >= 2 else float("nan")
        return cls(mse=float(np.dot(r, r) / r.size), mae=mae(p, t), r_squared=r2, count=int(p.size))

    def format_line(self) -> str:
        return f"mse={self.mse:.8e} mae={self.mae:.8e} r2={self.r_squared:.8e} n={self.count}"

    @classmethod
    def parse_line(cls, line: str) -> "Metrics":
        fields = dict(item.split("=", 1) for item in line.split())
        missing = {"mse", "mae", "r2", "n"} - fields.keys()
        if missing:
            raise ValueError(f"metrics line missing {sorted(missing)}: {line!r}")
        return cls(float(fields["mse"]), float(fields["mae"]), float(fields["r2"]), int(fields["n"]))
