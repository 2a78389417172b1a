"""File formats shared between pipeline stages.

Weekly dataset: one .npz archive holding every pixel's gap-free weekly series
on a common axis (arrays ``pixel_x``, ``pixel_y``, ``values`` of shape
(pixels, weeks, 9), plus ``epoch`` ISO date and ``step_days``).

Detections table: CSV with one row per scored pixel-week
(pixel_x,pixel_y,week,error,flag), NaN-free thanks to scoring starting at the
first complete window.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .core import N_BANDS, WEEK_STEP_DAYS, PixelSeries, SchemaError, TimeAxis


@dataclass
class WeeklyDataset:
    """Gap-free weekly series for a set of pixels on one shared axis."""

    pixel_ids: list[tuple[int, int]]
    axis: TimeAxis
    values: np.ndarray   # (pixels, weeks, N_BANDS)

    def __post_init__(self):
        if self.values.shape != (len(self.pixel_ids), self.axis.length, N_BANDS):
            raise ValueError(f"values shape {self.values.shape} inconsistent with ids/axis")

    def series(self, index: int) -> PixelSeries:
        return PixelSeries(
            pixel_id=self.pixel_ids[index],
            axis=self.axis,
            values=self.values[index],
            valid=np.ones(self.axis.length, dtype=bool),
        )

    def index_of(self, pixel_id: tuple[int, int]) -> int:
        return self.pixel_ids.index(pixel_id)


def save_weekly_dataset(ds: WeeklyDataset, path) -> None:
    np.savez(
        path,
        pixel_x=np.array([p[0] for p in ds.pixel_ids], dtype=np.int64),
        pixel_y=np.array([p[1] for p in ds.pixel_ids], dtype=np.int64),
        values=ds.values.astype(np.float64),
        epoch=np.array(ds.axis.epoch.isoformat()),
        step_days=np.array(ds.axis.step_days, dtype=np.int64),
    )


def load_weekly_dataset(path) -> WeeklyDataset:
    try:
        with np.load(path, allow_pickle=False) as archive:
            xs = archive["pixel_x"]
            ys = archive["pixel_y"]
            values = archive["values"]
            epoch = dt.date.fromisoformat(str(archive["epoch"]))
            step_days = int(archive["step_days"])
    except (KeyError, ValueError, OSError) as exc:
        raise SchemaError(f"{path}: not a weekly dataset archive ({exc})") from None
    axis = TimeAxis(epoch=epoch, step_days=step_days, length=values.shape[1])
    return WeeklyDataset(
        pixel_ids=[(int(x), int(y)) for x, y in zip(xs, ys)],
        axis=axis,
        values=values,
    )


def new_weekly_axis(epoch: dt.date, length: int) -> TimeAxis:
    return TimeAxis(epoch=epoch, step_days=WEEK_STEP_DAYS, length=length)


def write_detections_csv(path, rows) -> None:
    """Rows are (pixel_id, week, error, flag) for scored weeks only."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pixel_x", "pixel_y", "week", "error", "flag"])
        for pixel_id, week, error, flag in rows:
            writer.writerow([
                pixel_id[0], pixel_id[1], week,
                format(float(error), ".9g"), int(flag),
            ])


def read_detections_csv(path) -> dict[tuple[int, int], dict]:
    """Per-pixel detection summary: weeks, errors, flags, first flagged week."""
    per_pixel: dict[tuple[int, int], dict] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                key = (int(row["pixel_x"]), int(row["pixel_y"]))
                week = int(row["week"])
                error = float(row["error"])
                flag = bool(int(row["flag"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path} line {reader.line_num}: {exc}") from None
            entry = per_pixel.setdefault(key, {"weeks": [], "errors": [], "flags": [], "first_anomaly": None})
            entry["weeks"].append(week)
            entry["errors"].append(error)
            entry["flags"].append(flag)
    for entry in per_pixel.values():
        flagged = [w for w, f in zip(entry["weeks"], entry["flags"]) if f]
        entry["first_anomaly"] = min(flagged) if flagged else None
    return per_pixel
