"""Turning raw well data into aligned model inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from hdnn.data.io import CURVE_CHANNELS, DataError, RawWellData, WellCurves
from hdnn.tensor import RngStream

DEFAULT_LENGTH = 64
BASE_FEATURES = ("formation_thickness_m", "formation_median_depth_m", "perforation_thickness_m", "perforation_count")


def extract_formation_curves(curves: WellCurves, top_m: float, base_m: float) -> WellCurves:
    """Samples with ``top_m <= depth <= base_m``, all channels, in depth order."""
    sel = (curves.depths >= top_m) & (curves.depths <= base_m)
    n = int(sel.sum())
    if n < 2:
        raise DataError(f"only {n} curve sample(s) inside formation interval [{top_m}, {base_m}]; need at least 2")
    return WellCurves(curves.depths[sel].copy(), curves.values[sel].copy())


def resample_segment(segment: WellCurves, length: int = DEFAULT_LENGTH) -> np.ndarray:
    """Linearly interpolate every channel at ``length`` evenly spaced depths.

    The grid runs from the first to the last sample depth, both included, so
    the end values are carried over unchanged. Returns ``[channels, length]``.
    """
    if length < 2:
        raise ValueError(f"resample length must be >= 2, got {length}")
    depths = segment.depths
    if depths.size < 2:
        raise ValueError("segment needs at least 2 samples")
    grid = np.linspace(depths[0], depths[-1], length)
    return np.stack([np.interp(grid, depths, segment.values[:, c]) for c in range(segment.values.shape[1])])


def one_hot_encode(value: str, vocabulary: Sequence[str]) -> np.ndarray:
    vocabulary = list(vocabulary)
    if not vocabulary:
        raise ValueError("vocabulary is empty")
    if len(set(vocabulary)) != len(vocabulary):
        raise ValueError(f"vocabulary has duplicate tokens: {vocabulary}")
    try:
        i = vocabulary.index(value)
    except ValueError:
        raise ValueError(f"token {value!r} not in vocabulary {vocabulary}") from None
    out = np.zeros(len(vocabulary))
    out[i] = 1.0
    return out


def curve_averages(curves: WellCurves | np.ndarray) -> np.ndarray:
    """Per-channel mean of a segment or of a ``[channels, L]`` tensor."""
    if isinstance(curves, WellCurves):
        return curves.values.mean(axis=0)
    arr = np.asarray(curves, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError(f"expected [channels, L] with L >= 1, got {arr.shape}")
    return arr.mean(axis=1)


@dataclass
class MixedDataset:
    """Aligned per-instance numeric features, curve tensors and labels."""

    numeric: np.ndarray  # [M, d_num]
    curves: np.ndarray  # [M, 7, L]
    labels: np.ndarray | None  # [M]
    keys: list[tuple[str, str]]
    numeric_names: list[str]
    vocabularies: dict[str, list[str]]

    def __post_init__(self):
        m = len(self.keys)
        if self.numeric.shape[0] != m or self.curves.shape[0] != m:
            raise ValueError("numeric, curves and keys disagree on instance count")
        if self.labels is not None and self.labels.shape != (m,):
            raise ValueError("labels must be a vector with one entry per instance")
        if self.numeric.shape[1] != len(self.numeric_names):
            raise ValueError("numeric_names does not match numeric width")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def length(self) -> int:
        return self.curves.shape[2]

    def subset(self, indices) -> "MixedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            numeric=self.numeric[idx],
            curves=self.curves[idx],
            labels=None if self.labels is None else self.labels[idx],
            keys=[self.keys[i] for i in idx],
        )

    def with_curve_means(self) -> "MixedDataset":
        """Append the seven per-channel curve means to the numeric features."""
        if any(n.startswith("mean_") for n in self.numeric_names):
            return self
        means = self.curves.mean(axis=2) if len(self) else np.zeros((0, self.curves.shape[1]))
        return replace(
            self,
            numeric=np.hstack([self.numeric, means]),
            numeric_names=self.numeric_names + [f"mean_{c}" for c in CURVE_CHANNELS],
        )


def vocabularies_from(data: RawWellData) -> dict[str, list[str]]:
    return {c: sorted({f.categories[c] for f in data.formations}) for c in data.category_names}


def build_dataset(
    data: RawWellData,
    length: int = DEFAULT_LENGTH,
    vocabularies: dict[str, list[str]] | None = None,
) -> MixedDataset:
    """Extract, resample and assemble every formation in ``data``.

    Numeric features are formation thickness, median depth, perforation
    thickness, perforation count, then one-hot blocks for each categorical
    column. Vocabularies default to the sorted tokens present in ``data``.
    """
    if vocabularies is None:
        vocabularies = vocabularies_from(data)
    missing = [c for c in data.category_names if c not in vocabularies]
    if missing:
        raise DataError(f"no vocabulary for categorical column(s) {missing}")
    names = list(BASE_FEATURES)
    for c in data.category_names:
        names += [f"cat:{c}={tok}" for tok in vocabularies[c]]

    numeric, curves, labels, keys = [], [], [], []
    for f in data.formations:
        if f.well_id not in data.curves:
            raise DataError(f"formation {f.key}: no curves for well {f.well_id!r}")
        try:
            seg = extract_formation_curves(data.curves[f.well_id], f.top_m, f.base_m)
        except DataError as exc:
            raise DataError(f"formation {f.key}: {exc}") from None
        row = [f.thickness_m, f.median_depth_m, f.perforation_thickness_m, float(f.perforation_count)]
        for c in data.category_names:
            try:
                row.extend(one_hot_encode(f.categories[c], vocabularies[c]))
            except ValueError as exc:
                raise DataError(f"formation {f.key}: column cat:{c}: {exc}") from None
        numeric.append(row)
        curves.append(resample_segment(seg, length))
        labels.append(f.production)
        keys.append(f.key)

    m = len(keys)
    has_labels = m > 0 and all(v is not None for v in labels)
    return MixedDataset(
        numeric=np.array(numeric, dtype=np.float64).reshape(m, len(names)),
        curves=np.array(curves, dtype=np.float64).reshape(m, len(CURVE_CHANNELS), length),
        labels=np.array(labels, dtype=np.float64) if has_labels else None,
        keys=keys,
        numeric_names=names,
        vocabularies={c: list(v) for c, v in vocabularies.items()},
    )


def train_count(m: int, train_fraction: float) -> int:
    # round half up, not banker's rounding
    return int(math.floor(train_fraction * m + 0.5))


def split_dataset(dataset: MixedDataset, train_fraction: float, seed: int) -> tuple[MixedDataset, MixedDataset]:
    """Seeded shuffle then prefix split into (train, rest).

    Instances are first put in key order, so the partition depends only on
    the keys and the seed, not on the incoming row order.
    """
    if not 0 < train_fraction <= 1:
        raise ValueError(f"train fraction must be in (0, 1], got {train_fraction}")
    m = len(dataset)
    order = sorted(range(m), key=lambda i: dataset.keys[i])
    perm = RngStream(seed).child("split").permutation(m)
    shuffled = [order[i] for i in perm]
    n = train_count(m, train_fraction)
    return dataset.subset(shuffled[:n]), dataset.subset(shuffled[n:])
