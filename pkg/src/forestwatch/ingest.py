"""Read raw per-pixel observations and screen them with the scene-classification layer."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BAND_NAMES,
    N_BANDS,
    RAW_STEP_DAYS,
    EmptyInputError,
    IntegrityError,
    PixelSeries,
    SchemaError,
    TimeAxis,
)

# Scene-class codes 4 (vegetated) and 5 (not vegetated) are usable ground;
# everything else (clouds, shadows, snow, water, ...) is screened out.
DEFAULT_KEEP_CLASSES = frozenset({4, 5})

CSV_FIELDS = ("pixel_x", "pixel_y", "date", *BAND_NAMES, "SCL")


@dataclass(frozen=True)
class SclPolicy:
    """Which scene-class codes count as a usable observation."""

    keep_classes: frozenset[int] = DEFAULT_KEEP_CLASSES

    def __post_init__(self):
        if not self.keep_classes:
            raise ValueError("keep_classes must be non-empty")


@dataclass(slots=True)
class RawObservation:
    """One acquisition for one pixel: nine reflectances plus its scene class."""

    pixel_id: tuple[int, int]
    date: dt.date
    band_values: np.ndarray   # (N_BANDS,) float64
    scl: int


def _parse_row(fields: dict, line_no: int) -> RawObservation:
    missing = [name for name in CSV_FIELDS if fields.get(name) in (None, "")]
    if missing:
        raise SchemaError(f"line {line_no}: missing field(s) {', '.join(missing)}")
    try:
        pixel = (int(fields["pixel_x"]), int(fields["pixel_y"]))
        date = dt.date.fromisoformat(str(fields["date"]))
        values = np.array([float(fields[name]) for name in BAND_NAMES], dtype=np.float64)
        scl = int(fields["SCL"])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_no}: {exc}") from None
    if not 0 <= scl <= 11:
        raise SchemaError(f"line {line_no}: SCL code {scl} outside [0, 11]")
    return RawObservation(pixel_id=pixel, date=date, band_values=values, scl=scl)


def _iter_csv(stream) -> list[RawObservation]:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise SchemaError("empty input: no header row")
    unknown = set(reader.fieldnames) - set(CSV_FIELDS)
    if unknown:
        raise SchemaError(f"unknown column(s): {', '.join(sorted(unknown))}")
    out = []
    for row in reader:
        if row.get(None):
            raise SchemaError(f"line {reader.line_num}: too many columns")
        out.append(_parse_row(row, reader.line_num))
    return out


def _iter_ndjson(stream) -> list[RawObservation]:
    out = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise SchemaError(f"line {line_no}: expected a JSON object")
        out.append(_parse_row(obj, line_no))
    return out


def read_observations(source, fmt: str | None = None) -> list[RawObservation]:
    """Parse a CSV or NDJSON observation table.

    ``source`` is a path or an open text stream.  The format is taken from
    ``fmt`` ("csv" or "ndjson") or inferred from the file suffix (default
    csv).  Duplicate (pixel, date) pairs are rejected.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if fmt is None:
            fmt = "ndjson" if path.suffix.lower() in (".ndjson", ".jsonl") else "csv"
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return read_observations(fh, fmt=fmt)
    if fmt is None:
        fmt = "csv"
    if fmt == "csv":
        obs = _iter_csv(source)
    elif fmt == "ndjson":
        obs = _iter_ndjson(source)
    else:
        raise ValueError(f"unknown format: {fmt!r}")

    seen: set[tuple[tuple[int, int], dt.date]] = set()
    for o in obs:
        key = (o.pixel_id, o.date)
        if key in seen:
            raise IntegrityError(
                f"duplicate observation for pixel {o.pixel_id} on {o.date.isoformat()}"
            )
        seen.add(key)
    return obs


def group_by_pixel(obs: list[RawObservation]) -> dict[tuple[int, int], list[RawObservation]]:
    """Split a mixed observation list into per-pixel lists (input order kept)."""
    groups: dict[tuple[int, int], list[RawObservation]] = {}
    for o in obs:
        groups.setdefault(o.pixel_id, []).append(o)
    return groups


def _snap_index(date: dt.date, epoch: dt.date) -> int:
    """Nearest index on the epoch-anchored 5-day grid (remainder <= 2 rounds down)."""
    offset = (date - epoch).days
    index, rem = divmod(offset, RAW_STEP_DAYS)
    return index + 1 if rem > RAW_STEP_DAYS // 2 else index


def _collision_rank(scl: int) -> int:
    # Vegetated observations are least likely to be contaminated.
    if scl == 4:
        return 0
    if scl == 5:
        return 1
    return 2


def apply_scl_filter(
    obs: list[RawObservation],
    policy: SclPolicy = SclPolicy(),
    axis: TimeAxis | None = None,
) -> PixelSeries:
    """Place one pixel's observations on the 5-day grid and mask unusable ones.

    ``valid[t]`` is true iff an observation exists at t and its scene class is
    in the policy's keep set.  Band values are never altered, only masked.
    Off-grid acquisition dates are snapped to the nearest grid date; when two
    observations snap to the same slot the one with lower cloud risk wins
    (vegetated preferred, then input order).
    """
    if not obs:
        raise EmptyInputError("no observations for pixel")
    pixel_ids = {o.pixel_id for o in obs}
    if len(pixel_ids) != 1:
        raise IntegrityError(f"observations span multiple pixels: {sorted(pixel_ids)}")
    pixel_id = obs[0].pixel_id

    if axis is None:
        first = min(o.date for o in obs)
        last = max(o.date for o in obs)
        length = _snap_index(last, first) + 1
        axis = TimeAxis(epoch=first, step_days=RAW_STEP_DAYS, length=length)

    chosen: dict[int, tuple[int, int, RawObservation]] = {}
    for order, o in enumerate(obs):
        t = _snap_index(o.date, axis.epoch)
        if not 0 <= t < axis.length:
            continue
        cand = (_collision_rank(o.scl), order, o)
        if t not in chosen or cand[:2] < chosen[t][:2]:
            chosen[t] = cand

    values = np.full((axis.length, N_BANDS), np.nan)
    valid = np.zeros(axis.length, dtype=bool)
    for t, (_, _, o) in chosen.items():
        values[t] = o.band_values
        valid[t] = o.scl in policy.keep_classes
    return PixelSeries(pixel_id=pixel_id, axis=axis, values=values, valid=valid)
