"""Shared domain types: spectral bands, time grids, per-pixel series."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ForestWatchError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ForestWatchError):
    """Malformed input row or file (carries line/field context in the message)."""


class IntegrityError(ForestWatchError):
    """Duplicate keys or otherwise inconsistent input data."""


class EmptyInputError(ForestWatchError):
    """An operation received no usable data."""


class InsufficientDataError(ForestWatchError):
    """Too few valid observations for the requested operation."""


class DegenerateScaleError(ForestWatchError):
    """A band is constant over the scaling corpus (max == min)."""


class GridAlignmentError(ForestWatchError):
    """A date does not lie on the time axis grid."""


class ConfigError(ForestWatchError):
    """Invalid configuration key or value."""


class ModelFormatError(ForestWatchError):
    """Model file is corrupt, truncated, or of an unsupported version."""


class DivergenceError(ForestWatchError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class BandId(Enum):
    """The nine spectral bands used as model features, in canonical order."""

    B2 = "B2"    # blue
    B3 = "B3"    # green
    B4 = "B4"    # red
    B5 = "B5"    # red-edge 1
    B6 = "B6"    # red-edge 2
    B7 = "B7"    # red-edge 3
    B8 = "B8"    # near infrared
    B11 = "B11"  # shortwave infrared I
    B12 = "B12"  # shortwave infrared II


BAND_ORDER: tuple[BandId, ...] = tuple(BandId)
BAND_NAMES: tuple[str, ...] = tuple(b.value for b in BAND_ORDER)
N_BANDS = len(BAND_ORDER)

_BAND_INDEX = {b: i for i, b in enumerate(BAND_ORDER)}

# Window lengths the detector models are built for (weeks).
CANONICAL_WINDOW_SIZES = (4, 12, 26, 52)

RAW_STEP_DAYS = 5     # satellite revisit interval
WEEK_STEP_DAYS = 7


def band_index(band: BandId | str) -> int:
    """Position of a band in the canonical feature order, 0-based."""
    if isinstance(band, str):
        try:
            band = BandId(band)
        except ValueError:
            raise SchemaError(f"unknown band name: {band!r}") from None
    return _BAND_INDEX[band]


@dataclass(frozen=True)
class TimeAxis:
    """Uniform calendar grid: ``epoch + k * step_days`` for k in [0, length)."""

    epoch: dt.date
    step_days: int
    length: int

    def __post_init__(self):
        if self.step_days < 1:
            raise ValueError("step_days must be >= 1")
        if self.length < 0:
            raise ValueError("length must be >= 0")

    def index_to_date(self, index: int) -> dt.date:
        if not 0 <= index < self.length:
            raise GridAlignmentError(f"index {index} outside axis of length {self.length}")
        return self.epoch + dt.timedelta(days=index * self.step_days)

    def date_to_index(self, d: dt.date) -> int:
        offset = (d - self.epoch).days
        index, rem = divmod(offset, self.step_days)
        if rem != 0:
            raise GridAlignmentError(f"{d.isoformat()} is not on the {self.step_days}-day grid starting {self.epoch.isoformat()}")
        if not 0 <= index < self.length:
            raise GridAlignmentError(f"{d.isoformat()} lies outside the axis range")
        return index

    def dates(self) -> list[dt.date]:
        return [self.epoch + dt.timedelta(days=k * self.step_days) for k in range(self.length)]


@dataclass
class PixelSeries:
    """One pixel's multivariate reflectance time series with a validity mask.

    ``values`` rows are meaningful only where ``valid`` is true; after
    preprocessing the mask is all-true and every value is finite.
    """

    pixel_id: tuple[int, int]
    axis: TimeAxis
    values: np.ndarray   # (length, N_BANDS) float64, unitless reflectance
    valid: np.ndarray    # (length,) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != (self.axis.length, N_BANDS):
            raise ValueError(
                f"values shape {self.values.shape} does not match (length={self.axis.length}, bands={N_BANDS})"
            )
        if self.valid.shape != (self.axis.length,):
            raise ValueError("valid mask length does not match axis length")

    def band(self, band: BandId | str) -> np.ndarray:
        """Column view of one band's values."""
        return self.values[:, band_index(band)]

    @property
    def length(self) -> int:
        return self.axis.length


@dataclass(frozen=True)
class WindowSpec:
    """Length and stride for slicing a series into model input sequences.

    The canonical model window lengths are ``CANONICAL_WINDOW_SIZES``;
    membership is enforced where models are built, not here, so that
    experimental sizes can still flow through the windowing code.
    """

    size: int
    stride: int = 1

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("window size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
