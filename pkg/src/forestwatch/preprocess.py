"""Masked raw series to gap-free weekly series.

The chain (in pipeline order): additive seasonal decomposition feeding a
quartile-fence outlier screen, weekly mean aggregation, local least-squares
polynomial smoothing, exponentially weighted gap imputation, min-max scaling,
and fixed-length windowing for the sequence models.
"""
from __future__ import annotations

import datetime as dt
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    N_BANDS,
    WEEK_STEP_DAYS,
    DegenerateScaleError,
    EmptyInputError,
    InsufficientDataError,
    PixelSeries,
    TimeAxis,
    WindowSpec,
)

# Annual period lengths on the two grids.
PERIOD_RAW = 73     # 365 days / 5-day step
PERIOD_WEEKLY = 52


@dataclass(frozen=True)
class SgfConfig:
    """Sliding-window polynomial smoother settings: window is 2*half_width + 1 points."""

    half_width: int = 3
    order: int = 2

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if 2 * self.half_width + 1 <= self.order:
            raise ValueError("window (2S+1) must exceed the polynomial order")


@dataclass
class DecompositionResult:
    """Additive split of one band's series: input == trend + seasonal + remainder."""

    trend: np.ndarray
    seasonal: np.ndarray
    remainder: np.ndarray


def _interpolate_gaps(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Linear interpolation across invalid runs; edges held at the nearest valid value."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise EmptyInputError("series has no valid values")
    return np.interp(np.arange(values.size), idx, values[idx])


def _centered_moving_average(x: np.ndarray, period: int) -> np.ndarray:
    """Classical trend estimate; even periods use the half-weighted end kernel.

    Edge positions where the window does not fit are held at the nearest
    interior estimate so the decomposition is defined everywhere.
    """
    if period % 2 == 1:
        kernel = np.full(period, 1.0 / period)
    else:
        kernel = np.r_[0.5, np.ones(period - 1), 0.5] / period
    interior = np.convolve(x, kernel, mode="valid")
    half = (kernel.size - 1) // 2
    out = np.empty_like(x)
    out[half:half + interior.size] = interior
    out[:half] = interior[0]
    out[half + interior.size:] = interior[-1]
    return out


def decompose(
    values: np.ndarray,
    period: int,
    valid: np.ndarray | None = None,
) -> DecompositionResult:
    """Additive decomposition of one band's series.

    Trend comes from a centered moving average of length ``period``, the
    seasonal component from mean-centered period-wise means of the detrended
    series, and the remainder is the residual.  Gaps are linearly interpolated
    for the trend/seasonal estimation only; the remainder at valid indices is
    exactly ``values - trend - seasonal``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2 * period:
        raise InsufficientDataError(f"need at least {2 * period} points for period {period}, got {n}")
    if valid is None:
        valid = np.ones(n, dtype=bool)
    gap_fraction = 1.0 - valid.mean()
    if gap_fraction > 0.20:
        warnings.warn(
            f"gap fraction {gap_fraction:.0%} exceeds 20%; decomposition may be unreliable",
            stacklevel=2,
        )
    x = _interpolate_gaps(values, valid)
    trend = _centered_moving_average(x, period)
    detrended = x - trend
    phase = np.arange(n) % period
    means = np.bincount(phase, weights=detrended, minlength=period)
    means /= np.bincount(phase, minlength=period)
    means -= means.mean()
    seasonal = means[phase]
    remainder = x - trend - seasonal
    return DecompositionResult(trend=trend, seasonal=seasonal, remainder=remainder)


def tukey_outlier_mask(
    remainder: np.ndarray,
    fence_k: float = 1.5,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Quartile-fence outlier flags on a remainder series (true = outlier).

    Quartiles are computed over valid entries only; a degenerate IQR of zero
    flags nothing.
    """
    remainder = np.asarray(remainder, dtype=np.float64)
    if valid is None:
        valid = np.ones(remainder.size, dtype=bool)
    sample = remainder[valid]
    if sample.size < 4:
        raise InsufficientDataError("need at least 4 valid values for quartile fences")
    q1, q3 = np.quantile(sample, [0.25, 0.75])
    iqr = q3 - q1
    if iqr == 0.0:
        return np.zeros(remainder.size, dtype=bool)
    mask = (remainder < q1 - fence_k * iqr) | (remainder > q3 + fence_k * iqr)
    return mask & valid


def _week_start_ordinal(ordinal: int) -> int:
    # Ordinal day 1 (0001-01-01) is a Monday, so this lands on ISO week starts.
    return ordinal - (ordinal - 1) % 7


def aggregate_weekly(series: PixelSeries) -> PixelSeries:
    """Mean of valid observations per ISO week (Monday-anchored 7-day axis).

    Weeks that contain no valid observation are marked invalid.
    """
    in_axis = series.axis
    ordinals = in_axis.epoch.toordinal() + in_axis.step_days * np.arange(in_axis.length)
    week_starts = np.array([_week_start_ordinal(o) for o in ordinals])
    epoch_ord = week_starts[0]
    bins = (week_starts - epoch_ord) // 7
    n_weeks = int(bins[-1]) + 1

    sums = np.zeros((n_weeks, N_BANDS))
    counts = np.zeros(n_weeks)
    v = series.valid
    np.add.at(sums, bins[v], series.values[v])
    np.add.at(counts, bins[v], 1.0)

    valid = counts > 0
    values = np.full((n_weeks, N_BANDS), np.nan)
    values[valid] = sums[valid] / counts[valid, None]
    axis = TimeAxis(
        epoch=dt.date.fromordinal(int(epoch_ord)),
        step_days=WEEK_STEP_DAYS,
        length=n_weeks,
    )
    return PixelSeries(pixel_id=series.pixel_id, axis=axis, values=values, valid=valid)


def _nearest_valid(valid_idx: np.ndarray, pos: int, count: int) -> np.ndarray:
    """The ``count`` valid indices nearest to valid_idx[pos] (ties go left)."""
    lo = hi = pos
    center = valid_idx[pos]
    n = valid_idx.size
    while hi - lo + 1 < count:
        left_d = center - valid_idx[lo - 1] if lo > 0 else np.inf
        right_d = valid_idx[hi + 1] - center if hi + 1 < n else np.inf
        if left_d <= right_d:
            lo -= 1
        else:
            hi += 1
    return valid_idx[lo:hi + 1]


def savitzky_golay(
    values: np.ndarray,
    cfg: SgfConfig = SgfConfig(),
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Local least-squares polynomial smoothing of the valid entries.

    Each valid index is replaced by an order-r polynomial fit over its 2S+1
    nearest valid neighbours, evaluated at the index itself (relative
    position zero).  Invalid entries are left untouched.
    """
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones(values.size, dtype=bool)
    window = 2 * cfg.half_width + 1
    valid_idx = np.flatnonzero(valid)
    if valid_idx.size < window:
        raise InsufficientDataError(
            f"need at least {window} valid points for half_width {cfg.half_width}, got {valid_idx.size}"
        )
    out = values.copy()
    coeff_cache: dict[tuple[int, ...], np.ndarray] = {}
    for pos in range(valid_idx.size):
        i = valid_idx[pos]
        neighbours = _nearest_valid(valid_idx, pos, window)
        offsets = tuple(int(j - i) for j in neighbours)
        coeffs = coeff_cache.get(offsets)
        if coeffs is None:
            design = np.vander(np.array(offsets, dtype=np.float64), cfg.order + 1, increasing=True)
            coeffs = np.linalg.pinv(design)[0]
            coeff_cache[offsets] = coeffs
        out[i] = coeffs @ values[neighbours]
    return out


def ewma_impute(values: np.ndarray, valid: np.ndarray, horizon: int = 4) -> np.ndarray:
    """Fill gaps with an exponentially weighted mean of nearby valid values.

    Up to ``horizon`` valid neighbours are taken on each side; a neighbour at
    temporal distance j contributes weight 2**-j, renormalized over the
    neighbours actually available.  Returns a gap-free copy.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptyInputError("cannot impute a series with no valid values")
    out = values.copy()
    valid_idx = np.flatnonzero(valid)
    for t in np.flatnonzero(~valid):
        pos = int(np.searchsorted(valid_idx, t))
        neighbours = np.concatenate([
            valid_idx[max(0, pos - horizon):pos],
            valid_idx[pos:pos + horizon],
        ])
        weights = 2.0 ** -np.abs(neighbours - t)
        out[t] = np.dot(weights, values[neighbours]) / weights.sum()
    return out


@dataclass(frozen=True)
class ScalingParams:
    """Per-band min/max of the training corpus, for [0, 1] scaling."""

    minimum: np.ndarray   # (N_BANDS,)
    maximum: np.ndarray   # (N_BANDS,)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.minimum) / (self.maximum - self.minimum)

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * (self.maximum - self.minimum) + self.minimum


def fit_scaling(corpus: list[PixelSeries]) -> ScalingParams:
    """Per-band min/max over an entire (gap-free) training corpus."""
    if not corpus:
        raise EmptyInputError("scaling corpus is empty")
    stacked = np.concatenate([s.values for s in corpus], axis=0)
    minimum = stacked.min(axis=0)
    maximum = stacked.max(axis=0)
    degenerate = np.flatnonzero(maximum <= minimum)
    if degenerate.size:
        raise DegenerateScaleError(
            f"constant band(s) across corpus at column(s) {degenerate.tolist()}"
        )
    return ScalingParams(minimum=minimum, maximum=maximum)


def apply_scaling(series: PixelSeries, params: ScalingParams) -> PixelSeries:
    """Min-max scale a series with fitted parameters (values outside the
    training range fall outside [0, 1])."""
    return PixelSeries(
        pixel_id=series.pixel_id,
        axis=series.axis,
        values=params.transform(series.values),
        valid=series.valid.copy(),
    )


@dataclass
class SequenceBatch:
    """One model input window with its origin for traceability."""

    values: np.ndarray        # (window, N_BANDS)
    start: int                # index of the first week in the source series
    pixel_id: tuple[int, int]


def make_windows(series: PixelSeries, spec: WindowSpec) -> list[SequenceBatch]:
    """Slice a gap-free series into windows of ``spec.size`` at ``spec.stride``."""
    if not series.valid.all():
        raise InsufficientDataError("windowing requires a gap-free series")
    n = series.length
    if n < spec.size:
        return []
    return [
        SequenceBatch(values=series.values[start:start + spec.size].copy(),
                      start=start, pixel_id=series.pixel_id)
        for start in range(0, n - spec.size + 1, spec.stride)
    ]


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs for the masked-raw-to-weekly chain."""

    period: int = PERIOD_RAW
    tukey_k: float = 1.5
    sgf: SgfConfig = field(default_factory=SgfConfig)
    ewma_horizon: int = 4


def preprocess_series(series: PixelSeries, cfg: PreprocessConfig = PreprocessConfig()) -> PixelSeries:
    """Full chain from a masked 5-day series to a gap-free weekly series.

    Order: decomposition-based outlier screen on the raw grid, weekly mean
    aggregation, polynomial smoothing of valid weeks, then gap imputation.
    Scaling and windowing are separate steps because their parameters come
    from the training corpus and model.
    """
    valid = series.valid.copy()
    for b in range(N_BANDS):
        result = decompose(series.values[:, b], cfg.period, valid=series.valid)
        outliers = tukey_outlier_mask(result.remainder, cfg.tukey_k, valid=series.valid)
        valid &= ~outliers

    masked = PixelSeries(
        pixel_id=series.pixel_id, axis=series.axis, values=series.values, valid=valid
    )
    weekly = aggregate_weekly(masked)

    smoothed = np.column_stack([
        savitzky_golay(weekly.values[:, b], cfg.sgf, valid=weekly.valid)
        for b in range(N_BANDS)
    ])
    filled = np.column_stack([
        ewma_impute(smoothed[:, b], weekly.valid, horizon=cfg.ewma_horizon)
        for b in range(N_BANDS)
    ])
    return PixelSeries(
        pixel_id=series.pixel_id,
        axis=weekly.axis,
        values=filled,
        valid=np.ones(weekly.axis.length, dtype=bool),
    )
