"""Reading and writing the two-file well dataset (attributes.csv, curves.csv)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

CURVE_CHANNELS = ("CAL", "AC", "GR", "LLD", "LLS", "SP", "VSH")

ATTRIBUTE_COLUMNS = (
    "well_id",
    "formation_id",
    "formation_top_m",
    "formation_base_m",
    "perforation_thickness_m",
    "perforation_count",
)
LABEL_COLUMN = "production_t_per_d"
CATEGORY_PREFIX = "cat:"
CURVE_COLUMNS = ("well_id", "depth_m") + CURVE_CHANNELS


class DataError(ValueError):
    """Malformed or inconsistent input data; the message names file and line."""


@dataclass
class FormationRecord:
    well_id: str
    formation_id: str
    top_m: float
    base_m: float
    perforation_thickness_m: float
    perforation_count: int
    categories: dict[str, str] = field(default_factory=dict)
    production: float | None = None
    # derived from the decimal text so e.g. 2404.0 - 2307.9 is exactly 96.1
    thickness_m: float = 0.0
    median_depth_m: float = 0.0

    @property
    def key(self) -> tuple[str, str]:
        return (self.well_id, self.formation_id)


@dataclass
class WellCurves:
    depths: np.ndarray  # [N], strictly increasing
    values: np.ndarray  # [N, 7] in CURVE_CHANNELS order


@dataclass
class RawWellData:
    formations: list[FormationRecord]
    curves: dict[str, WellCurves]
    category_names: list[str] = field(default_factory=list)

    @property
    def has_labels(self) -> bool:
        return bool(self.formations) and all(f.production is not None for f in self.formations)


def _decimal(text: str, path, line: int, column: str) -> Decimal:
    try:
        d = Decimal(text.strip())
    except InvalidOperation:
        raise DataError(f"{path}:{line}: column {column}: expected a number, got {text!r}") from None
    if not d.is_finite():
        raise DataError(f"{path}:{line}: column {column}: expected a finite number, got {text!r}")
    return d


def _integer(text: str, path, line: int, column: str) -> int:
    d = _decimal(text, path, line, column)
    if d != d.to_integral_value():
        raise DataError(f"{path}:{line}: column {column}: expected an integer, got {text!r}")
    return int(d)


def _read_rows(path: Path):
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield header, reader.line_num, row
        else:
            # still validate the header of a data-less file
            yield header, None, None


def _check_attribute_header(header: list[str], path) -> list[str]:
    if tuple(header[:len(ATTRIBUTE_COLUMNS)]) != ATTRIBUTE_COLUMNS:
        raise DataError(f"{path}:1: header must start with {','.join(ATTRIBUTE_COLUMNS)}")
    cats = []
    rest = header[len(ATTRIBUTE_COLUMNS):]
    for i, name in enumerate(rest):
        if name == LABEL_COLUMN and i == len(rest) - 1:
            continue
        if name.startswith(CATEGORY_PREFIX) and len(name) > len(CATEGORY_PREFIX):
            cats.append(name[len(CATEGORY_PREFIX):])
            continue
        raise DataError(f"{path}:1: unexpected column {name!r}")
    if len(set(cats)) != len(cats):
        raise DataError(f"{path}:1: duplicate categorical columns")
    return cats


def read_attributes(path) -> tuple[list[FormationRecord], list[str]]:
    path = Path(path)
    records: list[FormationRecord] = []
    cats: list[str] | None = None
    for header, line, row in _read_rows(path):
        if cats is None:
            cats = _check_attribute_header(header, path)
        if row is None:
            break
        cells = dict(zip(header, (c.strip() for c in row)))
        well, form = cells["well_id"], cells["formation_id"]
        if not well or not form:
            raise DataError(f"{path}:{line}: well_id and formation_id must be non-empty")
        top = _decimal(cells["formation_top_m"], path, line, "formation_top_m")
        base = _decimal(cells["formation_base_m"], path, line, "formation_base_m")
        if base <= top:
            raise DataError(f"{path}:{line}: formation_base_m ({base}) must exceed formation_top_m ({top})")
        perf = _decimal(cells["perforation_thickness_m"], path, line, "perforation_thickness_m")
        count = _integer(cells["perforation_count"], path, line, "perforation_count")
        production = None
        if LABEL_COLUMN in cells and cells[LABEL_COLUMN] != "":
            production = float(_decimal(cells[LABEL_COLUMN], path, line, LABEL_COLUMN))
        categories = {}
        for c in cats:
            token = cells[CATEGORY_PREFIX + c]
            if token == "":
                raise DataError(f"{path}:{line}: column {CATEGORY_PREFIX + c}: empty category")
            categories[c] = token
        records.append(FormationRecord(
            well_id=well,
            formation_id=form,
            top_m=float(top),
            base_m=float(base),
            perforation_thickness_m=float(perf),
            perforation_count=count,
            categories=categories,
            production=production,
            thickness_m=float(base - top),
            median_depth_m=float((top + base) / 2),
        ))
    return records, cats or []


def read_curves(path) -> dict[str, WellCurves]:
    path = Path(path)
    wells: dict[str, tuple[list[float], list[list[float]]]] = {}
    order: list[str] = []
    current = None
    for header, line, row in _read_rows(path):
        if tuple(header) != CURVE_COLUMNS:
            raise DataError(f"{path}:1: header must be {','.join(CURVE_COLUMNS)}")
        if row is None:
            break
        well = row[0].strip()
        if not well:
            raise DataError(f"{path}:{line}: empty well_id")
        if well != current:
            if well in wells:
                raise DataError(f"{path}:{line}: rows of well {well!r} are not grouped together")
            wells[well] = ([], [])
            order.append(well)
            current = well
        depth = float(_decimal(row[1], path, line, "depth_m"))
        depths, values = wells[well]
        if depths and depth <= depths[-1]:
            raise DataError(f"{path}:{line}: depth {depth} not strictly increasing for well {well!r}")
        vals = []
        for name, cell in zip(CURVE_CHANNELS, row[2:]):
            if cell.strip() == "":
                raise DataError(f"{path}:{line}: column {name}: missing curve value")
            vals.append(float(_decimal(cell, path, line, name)))
        depths.append(depth)
        values.append(vals)
    return {
        w: WellCurves(np.array(wells[w][0], dtype=np.float64), np.array(wells[w][1], dtype=np.float64).reshape(-1, 7))
        for w in order
    }


def load_dataset(directory) -> RawWellData:
    """Parse ``attributes.csv`` and ``curves.csv`` from ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"missing data directory: {directory}")
    formations, cats = read_attributes(directory / "attributes.csv")
    curves = read_curves(directory / "curves.csv")
    return RawWellData(formations, curves, cats)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(data: RawWellData, directory, include_labels: bool | None = None, fmt=_fmt) -> None:
    """Write ``data`` back out in the two-file layout.

    ``include_labels`` defaults to writing the production column when any
    formation carries a label.
    """
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    if include_labels is None:
        include_labels = any(f.production is not None for f in data.formations)
    header = list(ATTRIBUTE_COLUMNS) + [CATEGORY_PREFIX + c for c in data.category_names]
    if include_labels:
        header.append(LABEL_COLUMN)
    with open(directory / "attributes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in data.formations:
            row = [r.well_id, r.formation_id, fmt(r.top_m), fmt(r.base_m), fmt(r.perforation_thickness_m),
                   str(r.perforation_count)]
            row += [r.categories[c] for c in data.category_names]
            if include_labels:
                row.append("" if r.production is None else fmt(r.production))
            w.writerow(row)
    with open(directory / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for well, c in data.curves.items():
            for d, vals in zip(c.depths, c.values):
                w.writerow([well, fmt(d)] + [fmt(v) for v in vals])
