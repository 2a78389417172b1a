"""Sequence autoencoder assembly, training, error scoring and persistence.

The encoder compresses a (window, 9) reflectance sequence through three
recurrent layers into a latent vector; the decoder expands it back and a
per-step affine head restores the feature dimension.  Anomalies are flagged
where the mean absolute reconstruction error over a chosen band subset
exceeds a quantile threshold calibrated on healthy data.
"""
from __future__ import annotations

import copy
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    CANONICAL_WINDOW_SIZES,
    N_BANDS,
    ConfigError,
    DivergenceError,
    EmptyInputError,
    InsufficientDataError,
    ModelFormatError,
    PixelSeries,
)
from .neuralnet import (
    Adam,
    Dropout,
    LstmLayer,
    RepeatVector,
    Sequential,
    TimeDistributedDense,
    clip_global_norm,
    mse_grad,
    mse_loss,
)
from .preprocess import ScalingParams, SequenceBatch

# Mean-absolute-error band subsets (canonical feature indices).
# rec_err uses all bands; the adjusted variants drop bands that
# reconstruct equally well on healthy and unhealthy ground.
ERROR_VARIANTS: dict[str, tuple[int, ...]] = {
    "rec_err": (0, 1, 2, 3, 4, 5, 6, 7, 8),
    "rec_err_adj1": (6, 2, 3, 4, 5, 7, 8),   # NIR, red, red-edge 1-3, SWIR I/II
    "rec_err_adj2": (3, 4, 5, 8),            # red-edge 1-3, SWIR II
    "rec_err_adj3": (6, 3, 4, 5, 7, 8),      # NIR, red-edge 1-3, SWIR I/II
    "rec_err_adj4": (6, 2, 7, 8),            # NIR, red, SWIR I/II
}

# Encoder unit counts; the decoder mirrors them.  "full" is the production
# architecture, "desk" a small preset for CI-scale experiments.
PRESETS: dict[str, dict] = {
    "full": {"units": (256, 128, 64), "epochs": 200},
    "desk": {"units": (32, 16, 8), "epochs": 30},
}

DEFAULT_QUANTILE = 0.998
MIN_CALIBRATION_SAMPLES = 500


@dataclass
class TrainConfig:
    """Optimization settings for autoencoder training."""

    batch_size: int = 128
    epochs: int = 200
    validation_split: float = 0.28
    seed: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.validation_split < 1.0:
            raise ValueError("validation_split must be in (0, 1)")


@dataclass
class TrainingHistory:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


@dataclass
class AutoencoderModel:
    """Layer stack plus everything needed to score new series."""

    net: Sequential
    window_size: int
    features: int
    units: tuple[int, int, int]
    dropout_rate: float
    seed: int
    scaling: ScalingParams | None = None
    thresholds: dict[str, float] = field(default_factory=dict)

    def layer_param_counts(self) -> list[int]:
        return self.net.layer_param_counts()

    def total_params(self) -> int:
        return self.net.total_params()

    @property
    def latent_size(self) -> int:
        return self.units[-1]


def build_model(
    window_size: int,
    features: int = N_BANDS,
    preset: str = "full",
    units: tuple[int, int, int] | None = None,
    dropout: float = 0.2,
    seed: int = 0,
    allow_any_window: bool = False,
) -> AutoencoderModel:
    """Assemble the encoder/decoder stack for one window length.

    Encoder: recurrent layers of units[0] and units[1] returning sequences
    (with dropout after the first), then units[2] returning only the final
    hidden state as the latent vector.  The decoder repeats the latent vector
    to the window length, mirrors the encoder widths, and finishes with a
    per-step affine map back to the feature count.
    """
    if window_size not in CANONICAL_WINDOW_SIZES and not allow_any_window:
        raise ConfigError(
            f"window size {window_size} not in {CANONICAL_WINDOW_SIZES}; "
            "pass allow_any_window=True to experiment"
        )
    if units is None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        units = PRESETS[preset]["units"]
    u1, u2, u3 = units
    rng = np.random.default_rng(seed)
    net = Sequential([
        LstmLayer(u1, features, return_sequences=True, rng=rng),
        Dropout(dropout),
        LstmLayer(u2, u1, return_sequences=True, rng=rng),
        LstmLayer(u3, u2, return_sequences=False, rng=rng),
        RepeatVector(window_size),
        LstmLayer(u3, u3, return_sequences=True, rng=rng),
        LstmLayer(u2, u3, return_sequences=True, rng=rng),
        Dropout(dropout),
        LstmLayer(u1, u2, return_sequences=True, rng=rng),
        TimeDistributedDense(u1, features, rng=rng),
    ])
    return AutoencoderModel(
        net=net,
        window_size=window_size,
        features=features,
        units=(u1, u2, u3),
        dropout_rate=dropout,
        seed=seed,
    )


def _stack_windows(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        x = np.asarray(corpus, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError("window array must be (n, window, features)")
        return x
    return np.stack([np.asarray(w.values, dtype=np.float64) for w in corpus])


def _forward_loss_chunked(model: AutoencoderModel, x: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for lo in range(0, x.shape[0], chunk):
        part = x[lo:lo + chunk]
        recon = model.net.forward(part, training=False)
        total += mse_loss(part, recon) * part.size
    return total / x.size


def train(
    model: AutoencoderModel,
    corpus: list[SequenceBatch] | np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> TrainingHistory:
    """Fit the autoencoder to healthy windows by minimizing reconstruction MSE.

    A seeded shuffle holds out the last ``validation_split`` fraction for
    validation; the weights with the best validation loss are restored at the
    end.  Raises DivergenceError if the loss becomes non-finite.
    """
    x = _stack_windows(corpus)
    if x.shape[0] == 0:
        raise EmptyInputError("training corpus is empty")
    if x.shape[1] != model.window_size or x.shape[2] != model.features:
        raise ValueError(
            f"windows of shape {x.shape[1:]} do not fit model ({model.window_size}, {model.features})"
        )
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(x.shape[0])
    x = x[perm]
    n_val = int(round(x.shape[0] * cfg.validation_split)) if x.shape[0] > 1 else 0
    x_train, x_val = (x[:-n_val], x[-n_val:]) if n_val else (x, x[:0])

    optimizer = Adam(model.net.params(), lr=cfg.learning_rate,
                     beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = TrainingHistory(train_loss=[], val_loss=[], best_epoch=0)
    best_val = np.inf
    best_params = None

    for epoch in range(cfg.epochs):
        order = rng.permutation(x_train.shape[0])
        loss_sum = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            batch = x_train[order[lo:lo + cfg.batch_size]]
            model.net.zero_grads()
            recon = model.net.forward(batch, training=True, rng=rng)
            loss = mse_loss(batch, recon)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            model.net.backward(mse_grad(batch, recon))
            clip_global_norm(model.net.grads(), cfg.clip_norm)
            optimizer.step(model.net.grads())
            loss_sum += loss * batch.size
        train_loss = loss_sum / x_train.size
        val_loss = _forward_loss_chunked(model, x_val) if n_val else train_loss
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_params = [p.copy() for p in model.net.params()]

    if best_params is not None:
        for p, best in zip(model.net.params(), best_params):
            p[...] = best
    return history


def reconstruct(model: AutoencoderModel, window) -> np.ndarray:
    """Deterministic (dropout-off) reconstruction of one window."""
    values = window.values if isinstance(window, SequenceBatch) else np.asarray(window, dtype=np.float64)
    if values.shape != (model.window_size, model.features):
        raise ValueError(
            f"window shape {values.shape} does not match model ({model.window_size}, {model.features})"
        )
    return model.net.forward(values[None], training=False)[0]


def reconstruct_batch(model: AutoencoderModel, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Reconstruct a stack of windows (n, window, features) without dropout."""
    windows = np.asarray(windows, dtype=np.float64)
    out = np.empty_like(windows)
    for lo in range(0, windows.shape[0], chunk):
        out[lo:lo + chunk] = model.net.forward(windows[lo:lo + chunk], training=False)
    return out


def reconstruction_error(x: np.ndarray, x_hat: np.ndarray, variant: str = "rec_err") -> np.ndarray:
    """Per-time-step mean absolute error over the variant's band subset.

    Accepts single windows (T, features) or stacks (n, T, features).
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if variant not in ERROR_VARIANTS:
        raise ConfigError(f"unknown error variant {variant!r}; choose from {sorted(ERROR_VARIANTS)}")
    bands = list(ERROR_VARIANTS[variant])
    return np.mean(np.abs(x[..., bands] - x_hat[..., bands]), axis=-1)


def calibrate_threshold(
    model: AutoencoderModel,
    healthy_windows,
    variant: str = "rec_err",
    quantile: float = DEFAULT_QUANTILE,
    positions: str = "all",
) -> float:
    """Empirical error quantile on healthy hold-out windows.

    ``positions`` selects which per-step errors enter the pool: "all" uses
    every step of every window, "last" only each window's final step (the
    statistic used by online detection).
    """
    x = _stack_windows(healthy_windows)
    if x.shape[0] == 0:
        raise EmptyInputError("no calibration windows")
    recon = reconstruct_batch(model, x)
    errors = reconstruction_error(x, recon, variant)
    pool = errors[:, -1] if positions == "last" else errors.ravel()
    if pool.size < MIN_CALIBRATION_SAMPLES:
        warnings.warn(
            f"only {pool.size} error samples; the {quantile} quantile is unreliable",
            stacklevel=2,
        )
    return float(np.quantile(pool, quantile))


@dataclass
class DetectionResult:
    """Week-aligned anomaly flags and the error series that produced them.

    Weeks before the first complete window (and, for stride > 1, weeks that
    are not the final week of any window) carry NaN error and no flag.
    """

    flags: np.ndarray    # (weeks,) bool
    errors: np.ndarray   # (weeks,) float, NaN where unscored

    @property
    def first_anomaly(self) -> int | None:
        hits = np.flatnonzero(self.flags)
        return int(hits[0]) if hits.size else None


def detect(
    model: AutoencoderModel,
    series,
    variant: str,
    tau: float,
    stride: int = 1,
) -> DetectionResult:
    """Online anomaly flags for a preprocessed, scaled weekly series.

    Week t is scored by the most recent complete window ending at t, i.e. the
    error at the window's final step; it is flagged when that error exceeds
    tau.  The flag at week t therefore depends only on weeks <= t.
    """
    values = series.values if isinstance(series, PixelSeries) else np.asarray(series, dtype=np.float64)
    n = values.shape[0]
    w = model.window_size
    if n < w:
        raise InsufficientDataError(f"series of {n} weeks is shorter than the {w}-week window")
    starts = np.arange(0, n - w + 1, stride)
    windows = np.stack([values[s:s + w] for s in starts])
    recon = reconstruct_batch(model, windows)
    errors_per_window = reconstruction_error(windows, recon, variant)

    errors = np.full(n, np.nan)
    errors[starts + w - 1] = errors_per_window[:, -1]
    flags = np.zeros(n, dtype=bool)
    scored = ~np.isnan(errors)
    flags[scored] = errors[scored] > tau
    return DetectionResult(flags=flags, errors=errors)


# ---------------------------------------------------------------------------
# Persistence: magic "LSAE", little-endian u16 version, u32 header length,
# JSON header, float64 weight blobs in layer order, u32 CRC-32 of everything
# after the version field.

MODEL_MAGIC = b"LSAE"
MODEL_VERSION = 1


def save_model(model: AutoencoderModel, path) -> None:
    header = {
        "window_size": model.window_size,
        "features": model.features,
        "units": list(model.units),
        "dropout": model.dropout_rate,
        "seed": model.seed,
        "thresholds": model.thresholds,
        "scaling": None if model.scaling is None else {
            "minimum": model.scaling.minimum.tolist(),
            "maximum": model.scaling.maximum.tolist(),
        },
        "param_shapes": [list(p.shape) for p in model.net.params()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(header_bytes)) + header_bytes
    for p in model.net.params():
        payload += np.ascontiguousarray(p, dtype="<f8").tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_model(path) -> AutoencoderModel:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    payload, crc_bytes = data[6:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt file)")
    (header_len,) = struct.unpack("<I", payload[:4])
    try:
        header = json.loads(payload[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header ({exc})") from None

    model = build_model(
        window_size=header["window_size"],
        features=header["features"],
        units=tuple(header["units"]),
        dropout=header["dropout"],
        seed=header["seed"],
        allow_any_window=True,
    )
    model.thresholds = {k: float(v) for k, v in header["thresholds"].items()}
    if header["scaling"] is not None:
        model.scaling = ScalingParams(
            minimum=np.array(header["scaling"]["minimum"]),
            maximum=np.array(header["scaling"]["maximum"]),
        )
    offset = 4 + header_len
    for p, shape in zip(model.net.params(), header["param_shapes"]):
        if list(p.shape) != shape:
            raise ModelFormatError(f"{path}: parameter shape mismatch {list(p.shape)} vs {shape}")
        nbytes = p.size * 8
        blob = payload[offset:offset + nbytes]
        if len(blob) != nbytes:
            raise ModelFormatError(f"{path}: truncated weight data")
        p[...] = np.frombuffer(blob, dtype="<f8").reshape(p.shape)
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError(f"{path}: trailing bytes after weights")
    return model
