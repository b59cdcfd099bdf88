"""Synthetic well blocks with a production label hidden in curve structure.

Each well gets a smooth latent reservoir-quality profile ``q(z)`` built from
a few narrow Gaussian bumps. The seven log curves are noisy monotone or mixed
transforms of ``q`` plus independent nuisance signals. A formation's label
integrates the exceedance ``max(q - threshold, 0)`` over its perforated
sub-interval, scaled by ``perforation_count ** count_exponent``. Because that
exceedance is localised, formation-mean curve values carry little of it,
while the curve shape (and the perforation settings) carry most.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hdnn.data.io import FormationRecord, RawWellData, WellCurves, write_dataset
from hdnn.tensor import RngStream


@dataclass
class SynthConfig:
    wells: int = 180
    formations_min: int = 3
    formations_max: int = 7
    seed: int = 0
    spacing_m: float = 0.5
    curve_noise: float = 0.03
    label_noise: float = 0.05
    well_offset: float = 1.5
    perforation_min_m: float = 0.5
    perforation_max_m: float = 4.0
    bump_width_min_m: float = 1.5
    bump_width_max_m: float = 4.0
    # production = scale * integral(max(q - threshold, 0)) * count ** count_exponent
    scale: float = 30.0
    threshold: float = 0.8
    count_exponent: float = 0.3

    def __post_init__(self):
        if self.wells < 0:
            raise ValueError(f"well count must be >= 0, got {self.wells}")
        if self.spacing_m <= 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing_m}")
        if not 1 <= self.formations_min <= self.formations_max:
            raise ValueError("need 1 <= formations_min <= formations_max")
        if self.curve_noise < 0 or self.label_noise < 0:
            raise ValueError("noise levels must be >= 0")


def _smooth_noise(rng: RngStream, z: np.ndarray, amplitude: float, n_waves: int = 3) -> np.ndarray:
    periods = rng.uniform(n_waves, 15.0, 80.0)
    phases = rng.uniform(n_waves, 0.0, 2 * np.pi)
    amps = rng.uniform(n_waves, 0.3, 1.0)
    out = sum(a * np.sin(2 * np.pi * z / p + ph) for a, p, ph in zip(amps, periods, phases))
    return amplitude * out / amps.sum()


def _well_layout(cfg: SynthConfig, rng: RngStream):
    n_form = int(rng.integers(cfg.formations_min, cfg.formations_max + 1))
    start = round(float(rng.uniform(None, 1500.0, 2400.0)), 1)
    depth = start + round(float(rng.uniform(None, 3.0, 10.0)), 1)
    intervals = []
    for _ in range(n_form):
        thickness = round(float(rng.uniform(None, 8.0, 35.0)), 1)
        intervals.append((round(depth, 1), round(depth + thickness, 1)))
        depth += thickness + round(float(rng.uniform(None, 3.0, 15.0)), 1)
    end = depth + 3.0
    return start, end, intervals


def _quality(cfg: SynthConfig, rng: RngStream, z: np.ndarray, intervals) -> np.ndarray:
    n_bumps = int(rng.integers(3, 7))
    q = np.zeros_like(z)
    for _ in range(n_bumps):
        top, base = intervals[int(rng.integers(0, len(intervals)))]
        center = rng.uniform(None, top, base)
        width = rng.uniform(None, cfg.bump_width_min_m, cfg.bump_width_max_m)
        amp = rng.uniform(None, 0.2, 1.6)
        q += amp * np.exp(-0.5 * ((z - center) / width) ** 2)
    return q + _smooth_noise(rng, z, 0.05)


def _curves(cfg: SynthConfig, rng: RngStream, z: np.ndarray, q: np.ndarray) -> np.ndarray:
    def nuisance():
        return _smooth_noise(rng, z, 1.0)

    def white(scale):
        return cfg.curve_noise * scale * rng.normal(z.shape)

    # per-well calibration offsets: shift whole curves, leave local shape alone
    off = rng.normal(7) * cfg.well_offset

    cal = 8.5 + 0.6 * nuisance() + 0.05 * q + white(1.0) + 0.5 * off[0]
    ac = 210.0 + 35.0 * q + 12.0 * nuisance() + white(20.0) + 25.0 * off[1]
    gr = 95.0 - 40.0 * q + 15.0 * nuisance() + white(20.0) + 25.0 * off[2]
    lld = np.exp(np.log(12.0) + 0.6 * q + 0.4 * nuisance() + white(0.5) + 0.8 * off[3])
    lls = lld * np.exp(-0.15 + 0.2 * nuisance() + white(0.3) + 0.2 * off[4])
    sp = -15.0 - 12.0 * q + 10.0 * nuisance() + white(5.0) + 10.0 * off[5]
    vsh = np.clip(0.45 - 0.2 * q + 0.15 * nuisance() + white(0.1) + 0.12 * off[6], 0.0, 1.0)
    return np.stack([cal, ac, gr, lld, lls, sp, vsh], axis=1)


def _perforation(cfg: SynthConfig, rng: RngStream, z, q, top: float, base: float):
    """Perforated sub-interval of random length, placed near the best-quality depth."""
    length = round(float(rng.uniform(None, cfg.perforation_min_m, cfg.perforation_max_m)), 1)
    length = min(length, base - top)
    inside = (z >= top) & (z <= base)
    peak = float(z[inside][np.argmax(q[inside])])
    center = peak + float(rng.uniform(None, -0.3, 0.3)) * length
    lo = min(max(center - length / 2, top), base - length)
    return lo, lo + length


def generate(cfg: SynthConfig) -> RawWellData:
    """Build the dataset in memory; :func:`synth_generate` writes it to disk."""
    root = RngStream(cfg.seed).child("synth")
    formations: list[FormationRecord] = []
    curves: dict[str, WellCurves] = {}
    for w in range(cfg.wells):
        rng = root.child(f"well-{w}")
        well_id = f"W{w + 1:03d}"
        start, end, intervals = _well_layout(cfg, rng)
        n = int(np.floor((end - start) / cfg.spacing_m)) + 1
        z = np.round(start + cfg.spacing_m * np.arange(n), 2)
        q = _quality(cfg, rng, z, intervals)
        values = np.round(_curves(cfg, rng, z, q), 4)
        curves[well_id] = WellCurves(z, values)

        # fine grid for the label integral
        for k, (top, base) in enumerate(intervals):
            lo, hi = _perforation(cfg, rng, z, q, top, base)
            count = int(rng.integers(1, 9))
            zz = np.linspace(lo, hi, 401)
            qq = np.interp(zz, z, q)
            exceed = np.trapezoid(np.maximum(qq - cfg.threshold, 0.0), zz)
            label = cfg.scale * exceed * count ** cfg.count_exponent
            label *= 1.0 + cfg.label_noise * float(rng.normal(None))
            label += abs(float(rng.normal(None))) * cfg.label_noise * cfg.scale * 0.1
            formations.append(FormationRecord(
                well_id=well_id,
                formation_id=f"F{k + 1}",
                top_m=top,
                base_m=base,
                perforation_thickness_m=round(hi - lo, 1),
                perforation_count=count,
                production=round(max(label, 0.0), 3),
                thickness_m=round(base - top, 1),
                median_depth_m=round((top + base) / 2, 2),
            ))
    return RawWellData(formations, curves, [])


def synth_generate(cfg: SynthConfig, out_dir) -> RawWellData:
    """Generate and write ``attributes.csv`` / ``curves.csv`` into ``out_dir``."""
    data = generate(cfg)
    write_dataset(data, Path(out_dir), include_labels=True)
    return data
