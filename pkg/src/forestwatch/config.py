"""Flat key=value configuration with env and flag overrides.

Precedence: command-line flags > FORESTWATCH_* environment variables >
config file > built-in defaults.  File syntax is one ``key = value`` per
line with ``#`` comments; list values are comma separated.
"""
from __future__ import annotations

import os
from pathlib import Path

from .core import ConfigError

ENV_PREFIX = "FORESTWATCH_"

# key -> default.  Types are inferred from the defaults; int-tuples hold
# comma-separated integers.
DEFAULTS: dict[str, object] = {
    "scl.keep": (4, 5),
    "tukey.k": 1.5,
    "sgf.half_width": 3,
    "sgf.order": 2,
    "ewma.horizon": 4,
    "window.size": 26,
    "window.stride": 1,
    "window.train_stride": 0,       # 0 = non-overlapping (stride = window size)
    "train.batch_size": 128,
    "train.epochs": 0,              # 0 = use the preset's epoch count
    "train.validation_split": 0.28,
    "train.learning_rate": 1e-3,
    "train.preset": "full",
    "train.calib_fraction": 0.25,
    "detect.variant": "rec_err_adj4",
    "detect.quantile": 0.998,
    "score.window": 52,
    "score.zero_lag": 2.0,
    "score.tn_reward": 0.5,
    "score.early_threshold": 0.17,
    "defoliation.ndvi_threshold": 0.53,
    "defoliation.tcw_threshold": -0.03,
    "defoliation.run_weeks": 3,
    "defoliation.combinator": "or",
    "baseline.train_weeks": 104,
    "baseline.sigma_factor": 3.0,
    "baseline.run_weeks": 3,
    "baseline.index": "ndvi",
}


def _parse_value(key: str, raw: str, default) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def load_config_file(path) -> dict[str, object]:
    """Parse a key=value file, validating keys against the registry."""
    values: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path} line {line_no}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path} line {line_no}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, DEFAULTS[key])
    return values


def _env_overrides(environ=None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    values = {}
    for key, default in DEFAULTS.items():
        env_name = ENV_PREFIX + key.upper().replace(".", "_")
        if env_name in environ:
            values[key] = _parse_value(key, environ[env_name], default)
    return values


def resolve(config_path=None, overrides: dict[str, object] | None = None, environ=None) -> dict[str, object]:
    """Merge defaults, file, environment and explicit overrides (in that order)."""
    merged = dict(DEFAULTS)
    if config_path is not None:
        merged.update(load_config_file(config_path))
    merged.update(_env_overrides(environ))
    if overrides:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    return merged
