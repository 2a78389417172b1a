"""Ground-truthed synthetic multispectral pixel series.

Healthy pixels follow a per-band seasonal sinusoid with pixel-level parameter
jitter and band noise; disturbed pixels drift linearly from the healthy
spectrum toward a degraded one (NIR and red-edge decline, red and SWIR rise)
starting at a known onset week.  Cloud and snow gaps are injected as scene
class codes so the full screening chain is exercised.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .core import BAND_NAMES, N_BANDS, RAW_STEP_DAYS, PixelSeries, TimeAxis
from .evaluation import label_defoliation
from .preprocess import PERIOD_RAW, aggregate_weekly

# Spruce-like reflectance defaults per band B2..B12 (synthetic, unitless).
HEALTHY_MEAN = np.array([0.030, 0.050, 0.040, 0.080, 0.180, 0.220, 0.350, 0.100, 0.050])
HEALTHY_AMPLITUDE = np.array([0.004, 0.008, 0.006, 0.010, 0.018, 0.022, 0.050, 0.012, 0.008])
DISTURBED_MEAN = np.array([0.045, 0.060, 0.090, 0.060, 0.120, 0.140, 0.180, 0.200, 0.150])
BAND_NOISE = np.array([0.0028, 0.0035, 0.0035, 0.0042, 0.0056, 0.0063, 0.0084, 0.0049, 0.0042])

# Seasonal peak in mid-summer for the vegetation-driven signal.
_SUMMER_PHASE = np.pi / 2.0 - 2.0 * np.pi * 36.0 / PERIOD_RAW
HEALTHY_PHASE = np.full(N_BANDS, _SUMMER_PHASE)

# Scene-class codes drawn for gap observations (shadow, cloud, cloud, cirrus, snow).
GAP_SCL_CODES = (3, 8, 9, 10, 11)
CLEAR_SCL_CODE = 4


@dataclass(frozen=True)
class SceneSpec:
    """Geometry, spectral model and disturbance settings of a synthetic scene."""

    nx: int
    ny: int
    years: int = 5
    start: dt.date = dt.date(2018, 1, 1)
    mean: np.ndarray = field(default_factory=lambda: HEALTHY_MEAN.copy())
    amplitude: np.ndarray = field(default_factory=lambda: HEALTHY_AMPLITUDE.copy())
    phase: np.ndarray = field(default_factory=lambda: HEALTHY_PHASE.copy())
    noise: np.ndarray = field(default_factory=lambda: BAND_NOISE.copy())
    disturbed_mean: np.ndarray = field(default_factory=lambda: DISTURBED_MEAN.copy())
    gap_probability: float = 0.12
    onset_week_min: int = 110
    onset_week_max: int = 190
    drift_weeks: int = 40
    # Pixel-to-pixel variation: mean offsets (fraction of band mean), noise
    # level multiplier range, and phase jitter in radians.
    mean_jitter: float = 0.04
    noise_scale_min: float = 0.6
    noise_scale_max: float = 2.0
    phase_jitter: float = 0.08

    def __post_init__(self):
        if self.drift_weeks < 1:
            raise ValueError("drift duration must be at least one week")
        if not 0.0 <= self.gap_probability < 1.0:
            raise ValueError("gap_probability must be in [0, 1)")
        blend = np.clip(self.disturbed_mean, 0.0, None) + np.abs(self.amplitude)
        if (self.disturbed_mean < 0).any() or (blend > 1.0).any():
            raise ValueError("disturbed spectrum must keep reflectances inside [0, 1]")

    @property
    def n_steps(self) -> int:
        return self.years * PERIOD_RAW

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny


@dataclass
class SynthPixel:
    """One generated pixel: raw 5-day series, scene classes, and ground truth."""

    series: PixelSeries
    scl: np.ndarray               # (steps,) int
    onset_week: int | None
    defoliation_week: int | None


def _noise_free_signal(spec: SceneSpec, rng_params: dict, onset_week: int | None) -> np.ndarray:
    """Closed-form per-band signal on the 5-day grid, before noise and gaps."""
    t = np.arange(spec.n_steps)
    phase = spec.phase + rng_params["phase_offset"]
    mean = spec.mean * (1.0 + rng_params["mean_offset"])
    seasonal = mean + spec.amplitude * np.sin(
        2.0 * np.pi * t[:, None] / PERIOD_RAW + phase
    )
    if onset_week is None:
        return seasonal
    # Linear blend toward the disturbed spectrum over the drift duration.
    onset_day = onset_week * 7.0
    alpha = (t * RAW_STEP_DAYS - onset_day) / (spec.drift_weeks * 7.0)
    alpha = np.clip(alpha, 0.0, 1.0)[:, None]
    return (1.0 - alpha) * seasonal + alpha * spec.disturbed_mean


def _truth_defoliation_week(spec: SceneSpec, signal: np.ndarray) -> int | None:
    """Defoliation label of the noise-free signal on the weekly grid."""
    axis = TimeAxis(epoch=spec.start, step_days=RAW_STEP_DAYS, length=spec.n_steps)
    raw = PixelSeries(
        pixel_id=(0, 0), axis=axis, values=signal,
        valid=np.ones(spec.n_steps, dtype=bool),
    )
    return label_defoliation(aggregate_weekly(raw))


def generate_pixel(
    spec: SceneSpec,
    disturbed: bool,
    seed: int | np.random.SeedSequence,
    pixel_id: tuple[int, int] = (0, 0),
) -> SynthPixel:
    """Deterministically generate one pixel's raw series with scene classes.

    The ground-truth defoliation week comes from labelling the noise-free
    signal; healthy pixels are constructed so that it is None.
    """
    rng = np.random.default_rng(seed)
    onset_week = int(rng.integers(spec.onset_week_min, spec.onset_week_max + 1)) if disturbed else None
    params = {
        "mean_offset": rng.normal(0.0, spec.mean_jitter, size=N_BANDS),
        "phase_offset": rng.normal(0.0, spec.phase_jitter, size=N_BANDS),
        "noise_scale": rng.uniform(spec.noise_scale_min, spec.noise_scale_max),
    }
    signal = _noise_free_signal(spec, params, onset_week)
    defoliation_week = _truth_defoliation_week(spec, signal)

    noise = rng.normal(0.0, 1.0, size=signal.shape) * spec.noise * params["noise_scale"]
    values = np.clip(signal + noise, 0.0, 1.0)

    gaps = rng.random(spec.n_steps) < spec.gap_probability
    scl = np.full(spec.n_steps, CLEAR_SCL_CODE, dtype=int)
    scl[gaps] = rng.choice(GAP_SCL_CODES, size=int(gaps.sum()))

    axis = TimeAxis(epoch=spec.start, step_days=RAW_STEP_DAYS, length=spec.n_steps)
    series = PixelSeries(
        pixel_id=pixel_id, axis=axis, values=values,
        valid=np.ones(spec.n_steps, dtype=bool),
    )
    return SynthPixel(series=series, scl=scl,
                      onset_week=onset_week, defoliation_week=defoliation_week)


def generate_scene(
    spec: SceneSpec,
    disturbed_fraction: float,
    seed: int,
    observations_path,
    truth_path,
) -> dict:
    """Write a full scene as an ingest-format CSV plus a ground-truth CSV.

    Exactly round(fraction * n_pixels) pixels are disturbed; which ones is a
    seeded permutation, and every pixel derives its own child seed, so the
    scene is reproducible from (spec, fraction, seed) alone.
    """
    if not 0.0 <= disturbed_fraction <= 1.0:
        raise ValueError("disturbed_fraction must be in [0, 1]")
    root = np.random.SeedSequence(seed)
    assign_rng = np.random.default_rng(root.spawn(1)[0])
    n = spec.n_pixels
    n_disturbed = int(round(disturbed_fraction * n))
    disturbed_set = set(assign_rng.permutation(n)[:n_disturbed].tolist())
    pixel_seeds = root.spawn(n)

    dates = [spec.start + dt.timedelta(days=RAW_STEP_DAYS * k) for k in range(spec.n_steps)]
    date_strings = [d.isoformat() for d in dates]

    n_written = 0
    with open(observations_path, "w", encoding="utf-8", newline="") as obs_fh, \
         open(truth_path, "w", encoding="utf-8", newline="") as truth_fh:
        obs = csv.writer(obs_fh, lineterminator="\n")
        obs.writerow(["pixel_x", "pixel_y", "date", *BAND_NAMES, "SCL"])
        truth = csv.writer(truth_fh, lineterminator="\n")
        truth.writerow(["pixel_x", "pixel_y", "onset_week", "defoliation_week"])

        for idx in range(n):
            x, y = idx % spec.nx, idx // spec.nx
            pixel = generate_pixel(spec, idx in disturbed_set, pixel_seeds[idx], pixel_id=(x, y))
            for t, date_str in enumerate(date_strings):
                obs.writerow([
                    x, y, date_str,
                    *(format(v, ".6f") for v in pixel.series.values[t]),
                    int(pixel.scl[t]),
                ])
            truth.writerow([
                x, y,
                "" if pixel.onset_week is None else pixel.onset_week,
                "" if pixel.defoliation_week is None else pixel.defoliation_week,
            ])
            n_written += 1

    return {"pixels": n_written, "disturbed": n_disturbed, "steps": spec.n_steps}


def read_truth_csv(path) -> dict[tuple[int, int], tuple[int | None, int | None]]:
    """Ground-truth table: pixel -> (onset_week, defoliation_week)."""
    truth = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["pixel_x"]), int(row["pixel_y"]))
            onset = int(row["onset_week"]) if row["onset_week"] else None
            defol = int(row["defoliation_week"]) if row["defoliation_week"] else None
            truth[key] = (onset, defol)
    return truth
