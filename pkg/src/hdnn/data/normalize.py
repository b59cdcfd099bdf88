"""Z-score normalisation fitted on a training split."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from hdnn.data.preprocess import MixedDataset

STD_FLOOR = 1e-8


@dataclass
class Normalizer:
    numeric_mean: np.ndarray
    numeric_std: np.ndarray
    curve_mean: np.ndarray
    curve_std: np.ndarray
    label_mean: float = 0.0
    label_std: float = 1.0
    floor: float = STD_FLOOR
    # pipeline settings that must travel with the model
    numeric_names: list[str] = field(default_factory=list)
    vocabularies: dict[str, list[str]] = field(default_factory=dict)
    length: int = 64

    def apply(self, dataset: MixedDataset) -> MixedDataset:
        """Normalised copy of ``dataset`` (numeric, curves and labels if present)."""
        if dataset.numeric_names != self.numeric_names:
            raise ValueError(
                f"dataset features {dataset.numeric_names} do not match the fitted features {self.numeric_names}"
            )
        if dataset.length != self.length:
            raise ValueError(f"dataset curve length {dataset.length} != fitted length {self.length}")
        return replace(
            dataset,
            numeric=(dataset.numeric - self.numeric_mean) / self.numeric_std,
            curves=(dataset.curves - self.curve_mean[None, :, None]) / self.curve_std[None, :, None],
            labels=None if dataset.labels is None else self.transform_labels(dataset.labels),
        )

    def transform_labels(self, labels: np.ndarray) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) - self.label_mean) / self.label_std

    def inverse_labels(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.label_std + self.label_mean

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "floor": self.floor,
            "numeric_names": list(self.numeric_names),
            "vocabularies": {k: list(v) for k, v in self.vocabularies.items()},
            "length": self.length,
        }
        arrays = {
            "numeric_mean": self.numeric_mean,
            "numeric_std": self.numeric_std,
            "curve_mean": self.curve_mean,
            "curve_std": self.curve_std,
            "label": np.array([self.label_mean, self.label_std]),
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "Normalizer":
        needed = {"numeric_mean", "numeric_std", "curve_mean", "curve_std", "label"}
        if set(arrays) != needed:
            raise ValueError(f"normalizer state needs arrays {sorted(needed)}, got {sorted(arrays)}")
        return cls(
            numeric_mean=arrays["numeric_mean"],
            numeric_std=arrays["numeric_std"],
            curve_mean=arrays["curve_mean"],
            curve_std=arrays["curve_std"],
            label_mean=float(arrays["label"][0]),
            label_std=float(arrays["label"][1]),
            floor=float(meta["floor"]),
            numeric_names=list(meta["numeric_names"]),
            vocabularies={k: list(v) for k, v in meta["vocabularies"].items()},
            length=int(meta["length"]),
        )


def _mean_std(x: np.ndarray, axis, floor: float) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=axis)
    std = np.maximum(x.std(axis=axis), floor)
    return mean, std


def fit_normalizer(train: MixedDataset, floor: float = STD_FLOOR) -> Normalizer:
    """Population mean/std per numeric feature, per curve channel and for labels.

    Curve statistics pool over instances and depth samples. Stds below
    ``floor`` are raised to it.
    """
    if len(train) < 2:
        raise ValueError(f"fitting a normalizer needs at least 2 instances, got {len(train)}")
    num_mean, num_std = _mean_std(train.numeric, 0, floor)
    cur_mean, cur_std = _mean_std(train.curves, (0, 2), floor)
    if train.labels is not None:
        lab_mean, lab_std = float(train.labels.mean()), float(max(train.labels.std(), floor))
    else:
        lab_mean, lab_std = 0.0, 1.0
    return Normalizer(
        numeric_mean=num_mean,
        numeric_std=num_std,
        curve_mean=cur_mean,
        curve_std=cur_std,
        label_mean=lab_mean,
        label_std=lab_std,
        floor=floor,
        numeric_names=list(train.numeric_names),
        vocabularies={k: list(v) for k, v in train.vocabularies.items()},
        length=train.length,
    )
