"""Well/formation data: CSV ingestion, preprocessing, normalisation, synthesis."""

from hdnn.data.io import CURVE_CHANNELS, DataError, FormationRecord, RawWellData, WellCurves, load_dataset, write_dataset
from hdnn.data.normalize import Normalizer, fit_normalizer
from hdnn.data.preprocess import (
    MixedDataset,
    build_dataset,
    curve_averages,
    extract_formation_curves,
    one_hot_encode,
    resample_segment,
    split_dataset,
)

__all__ = [
    "CURVE_CHANNELS",
    "DataError",
    "FormationRecord",
    "MixedDataset",
    "Normalizer",
    "RawWellData",
    "WellCurves",
    "build_dataset",
    "curve_averages",
    "extract_formation_curves",
    "fit_normalizer",
    "load_dataset",
    "one_hot_encode",
    "resample_segment",
    "split_dataset",
    "write_dataset",
]
