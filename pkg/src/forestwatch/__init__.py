"""Early forest-health anomaly detection from multispectral satellite pixel
time series: preprocessing, a sequence autoencoder with quantile-calibrated
anomaly thresholds, a timing-aware evaluation framework, a break-detection
baseline, and a synthetic scene generator."""

__version__ = "0.1.0"

from .core import (
    BAND_NAMES,
    BAND_ORDER,
    CANONICAL_WINDOW_SIZES,
    N_BANDS,
    BandId,
    ForestWatchError,
    PixelSeries,
    TimeAxis,
    WindowSpec,
    band_index,
)

__all__ = [
    "BAND_NAMES",
    "BAND_ORDER",
    "CANONICAL_WINDOW_SIZES",
    "N_BANDS",
    "BandId",
    "ForestWatchError",
    "PixelSeries",
    "TimeAxis",
    "WindowSpec",
    "band_index",
    "__version__",
]
