"""Defoliation labelling, detection scoring, metric aggregation, and the
harmonic-regression break baseline.

Detections are judged against an anomaly window around the defoliation week:
early flags earn a positive pre-defoliation score (pd_score), late flags and
false alarms are penalized, and quiet healthy pixels earn a fixed reward.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass

import numpy as np

from .core import (
    EmptyInputError,
    InsufficientDataError,
    PixelSeries,
    band_index,
)

# Tasseled-cap wetness coefficients for bands B2, B3, B4, B8, B11, B12.
TCW_COEFFS = {
    "B2": 0.1509,
    "B3": 0.1973,
    "B4": 0.3279,
    "B8": 0.3406,
    "B11": -0.7112,
    "B12": -0.4572,
}

DEFAULT_NDVI_THRESHOLD = 0.53
DEFAULT_TCW_THRESHOLD = -0.03
DEFAULT_RUN_WEEKS = 3

# Weeks per year for the harmonic baseline's annual regressor.
ANNUAL_PERIOD_WEEKS = 365.25 / 7.0


def _band_matrix(series) -> np.ndarray:
    return series.values if isinstance(series, PixelSeries) else np.asarray(series, dtype=np.float64)


def ndvi(series) -> np.ndarray:
    """(NIR - red) / (NIR + red); NaN where the denominator is zero."""
    values = _band_matrix(series)
    nir = values[:, band_index("B8")]
    red = values[:, band_index("B4")]
    denom = nir + red
    out = np.full(values.shape[0], np.nan)
    ok = denom != 0.0
    out[ok] = (nir[ok] - red[ok]) / denom[ok]
    return out


def tcw(series) -> np.ndarray:
    """Tasseled-cap wetness: fixed linear combination of six bands."""
    values = _band_matrix(series)
    out = np.zeros(values.shape[0])
    for name, coeff in TCW_COEFFS.items():
        out += coeff * values[:, band_index(name)]
    return out


def _first_run(condition: np.ndarray, run: int) -> int | None:
    """First index where ``condition`` holds for ``run`` consecutive entries."""
    count = 0
    for t, hit in enumerate(condition):
        count = count + 1 if hit else 0
        if count == run:
            return t - run + 1
    return None


def label_defoliation(
    series,
    ndvi_threshold: float = DEFAULT_NDVI_THRESHOLD,
    tcw_threshold: float = DEFAULT_TCW_THRESHOLD,
    run_weeks: int = DEFAULT_RUN_WEEKS,
    combinator: str = "or",
) -> int | None:
    """First week opening a run of ``run_weeks`` below-threshold weeks.

    Each week is below threshold when vegetation NDVI < ndvi_threshold or
    wetness TCW < tcw_threshold ("or" combinator; "and" requires both).
    Returns None for series that never defoliate.
    """
    n = ndvi(series) < ndvi_threshold
    w = tcw(series) < tcw_threshold
    if combinator == "or":
        below = n | w
    elif combinator == "and":
        below = n & w
    else:
        raise ValueError(f"combinator must be 'or' or 'and', got {combinator!r}")
    return _first_run(below, run_weeks)


@dataclass(frozen=True)
class ScoreConfig:
    """Anomaly-window scoring settings.

    ``anomaly_window`` is how many weeks before defoliation a flag still
    counts as a true positive; ``zero_lag`` is the lag (weeks after
    defoliation) at which the score crosses zero.
    """

    anomaly_window: int = 52
    zero_lag: float = 2.0
    tn_reward: float = 0.5
    early_threshold: float = 0.17

    def __post_init__(self):
        if self.anomaly_window <= 0:
            raise ValueError("anomaly_window must be positive")
        if not 0.0 <= self.tn_reward <= 1.0:
            raise ValueError("tn_reward must be in [0, 1]")

    @property
    def late_limit(self) -> float:
        """Largest lag still classified as a true positive (score floor)."""
        return self.zero_lag + (self.anomaly_window + 2) / 3.0


def pd_score(lag: float, k: int = 52, zero_lag: float = 2.0) -> float:
    """Piecewise-linear timing score in [-1, 1].

    Linear in the lag (detection week minus defoliation week) with slope
    -3/(k+2): zero at ``zero_lag`` weeks after defoliation, saturating at 1
    for detections earlier than zero_lag - (k+2)/3 and at -1 for detections
    later than zero_lag + (k+2)/3.
    """
    raw = 3.0 / (k + 2.0) * (zero_lag - lag)
    return float(np.clip(raw, -1.0, 1.0))


@dataclass
class DetectionRecord:
    """Per-pixel outcome of judging a detector against the defoliation label.

    ``score`` is the pd_score for TP, -1 for FP, the TN reward for TN, and
    None for FN (missed pixels carry no timing score but count in metrics).
    """

    pixel_id: tuple[int, int]
    first_anomaly_week: int | None
    defoliation_week: int | None
    lag: float | None
    label: str   # TP | FP | FN | TN
    score: float | None


def classify(
    first_anomaly: int | None,
    defoliation: int | None,
    cfg: ScoreConfig = ScoreConfig(),
    pixel_id: tuple[int, int] = (0, 0),
) -> DetectionRecord:
    """Assign TP/FP/FN/TN and a score from the first flag and the label week.

    A flag counts as TP only when its lag falls in [-k, zero_lag + (k+2)/3];
    flags outside that window, or in never-defoliating pixels, are FP with
    score -1.  Only the first flag is judged.
    """
    if first_anomaly is None and defoliation is None:
        return DetectionRecord(pixel_id, None, None, None, "TN", cfg.tn_reward)
    if first_anomaly is None:
        return DetectionRecord(pixel_id, None, defoliation, None, "FN", None)
    if defoliation is None:
        return DetectionRecord(pixel_id, first_anomaly, None, None, "FP", -1.0)
    lag = float(first_anomaly - defoliation)
    if -cfg.anomaly_window <= lag <= cfg.late_limit:
        score = pd_score(lag, k=cfg.anomaly_window, zero_lag=cfg.zero_lag)
        return DetectionRecord(pixel_id, first_anomaly, defoliation, lag, "TP", score)
    return DetectionRecord(pixel_id, first_anomaly, defoliation, lag, "FP", -1.0)


@dataclass
class EvaluationReport:
    """Confusion counts and the derived metrics.

    Ratios with a zero denominator are None rather than zero.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    mean_pds: float | None           # over scored records, TN included
    mean_pds_excl_tn: float | None   # over scored records, TN excluded
    pds_early_fraction: float | None  # TPs scoring above the early threshold

    def to_dict(self) -> dict:
        return {
            "counts": {"TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn},
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mean_pds": self.mean_pds,
            "mean_pds_excl_tn": self.mean_pds_excl_tn,
            "pds_early_fraction": self.pds_early_fraction,
        }


def aggregate(records: list[DetectionRecord], cfg: ScoreConfig = ScoreConfig()) -> EvaluationReport:
    """Confusion counts, accuracy/precision/recall/F1 and score summaries."""
    if not records:
        raise EmptyInputError("no detection records to aggregate")
    counts = {"TP": 0, "FP": 0, "FN": 0, "TN": 0}
    for r in records:
        counts[r.label] += 1
    tp, fp, fn, tn = counts["TP"], counts["FP"], counts["FN"], counts["TN"]
    total = tp + fp + fn + tn

    def ratio(num, denom):
        return num / denom if denom else None

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)

    scored = [r.score for r in records if r.score is not None]
    scored_no_tn = [r.score for r in records if r.score is not None and r.label != "TN"]
    tp_scores = [r.score for r in records if r.label == "TP"]
    early = [s for s in tp_scores if s > cfg.early_threshold]
    return EvaluationReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        accuracy=ratio(tp + tn, total),
        precision=precision,
        recall=recall,
        f1=f1,
        mean_pds=float(np.mean(scored)) if scored else None,
        mean_pds_excl_tn=float(np.mean(scored_no_tn)) if scored_no_tn else None,
        pds_early_fraction=ratio(len(early), len(tp_scores)),
    )


def baseline_break_scores(
    series,
    train_end,
    vi: str = "ndvi",
    sigma_factor: float = 3.0,
    run_weeks: int = 3,
) -> tuple[np.ndarray, int | None]:
    """Monitoring-period deviation scores of the harmonic baseline.

    A trend plus first-order annual harmonic is least-squares fitted to the
    vegetation index over weeks [0, train_end).  Returns the per-week
    absolute residual in units of the training residual spread for every
    monitored week, and the first week opening a run of ``run_weeks`` weeks
    exceeding ``sigma_factor`` (None when no such run occurs).
    """
    if vi == "ndvi":
        index = ndvi(series)
    elif vi == "tcw":
        index = tcw(series)
    else:
        raise ValueError(f"vi must be 'ndvi' or 'tcw', got {vi!r}")

    if isinstance(train_end, dt.date):
        if not isinstance(series, PixelSeries):
            raise ValueError("date-valued train_end requires a PixelSeries")
        train_end = series.axis.date_to_index(train_end)
    train_end = int(train_end)
    if train_end < 104:
        raise InsufficientDataError(
            f"reference period of {train_end} weeks is shorter than 2 years (104 weeks)"
        )
    if train_end >= index.size:
        raise InsufficientDataError("no monitoring period after the reference period")

    t = np.arange(index.size, dtype=np.float64)
    omega = 2.0 * np.pi / ANNUAL_PERIOD_WEEKS
    design = np.column_stack([np.ones_like(t), t, np.sin(omega * t), np.cos(omega * t)])
    beta, *_ = np.linalg.lstsq(design[:train_end], index[:train_end], rcond=None)
    residuals = index - design @ beta
    train_resid = residuals[:train_end]
    dof = max(train_end - design.shape[1], 1)
    sigma = max(float(np.sqrt(np.sum(train_resid**2) / dof)), 1e-12)

    z = np.abs(residuals[train_end:]) / sigma
    hit = _first_run(z > sigma_factor, run_weeks)
    return z, None if hit is None else train_end + hit


def baseline_break_detect(
    series,
    train_end,
    vi: str = "ndvi",
    sigma_factor: float = 3.0,
    run_weeks: int = 3,
) -> int | None:
    """First structural break of a vegetation index after a reference period."""
    _, break_week = baseline_break_scores(
        series, train_end, vi=vi, sigma_factor=sigma_factor, run_weeks=run_weeks
    )
    return break_week


def write_records_csv(records: list[DetectionRecord], path) -> None:
    """Per-pixel outcome table: pixel_x,pixel_y,class,lag,pd_score."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pixel_x", "pixel_y", "class", "lag", "pd_score"])
        for r in records:
            writer.writerow([
                r.pixel_id[0],
                r.pixel_id[1],
                r.label,
                "" if r.lag is None else format(r.lag, ".9g"),
                "" if r.score is None else format(r.score, ".9g"),
            ])


def read_records_csv(path) -> list[DetectionRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(DetectionRecord(
                pixel_id=(int(row["pixel_x"]), int(row["pixel_y"])),
                first_anomaly_week=None,
                defoliation_week=None,
                lag=float(row["lag"]) if row["lag"] else None,
                label=row["class"],
                score=float(row["pd_score"]) if row["pd_score"] else None,
            ))
    return records


def write_report_json(report: EvaluationReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
