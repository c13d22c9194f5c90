"""Error metrics, baseline predictors and the benchmark runner.

Metric definitions (``t`` actual, ``p`` predicted, over cells with ground truth):

* MAE  = mean |p - t|
* MAPE = mean |p - t| / |t| * 100, cells with ``t == 0`` excluded and counted
* RMSE = mean over trips of sqrt(mean over that trip's cells of (p - t)**2)

The per-trip RMSE differs from the pooled one, which is reported alongside as
``rmse_pooled``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np

from etacnn.checkpoint import Checkpoint
from etacnn.dataio import DayMatrix
from etacnn.errors import ConfigurationError
from etacnn.inference import one_step_predictions, rollout_predictions

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    mape: float
    mae: float
    rmse: float
    rmse_pooled: float
    n_cells: int  # cells with ground truth
    n_mape_cells: int
    n_excluded: int  # ground-truth cells left out of MAPE because t == 0
    per_stop_mae: np.ndarray = field(repr=False, default=None)
    per_stop_mape: np.ndarray = field(repr=False, default=None)
    per_stop_rmse: np.ndarray = field(repr=False, default=None)


def compute_metrics(predicted, actual, validity=None) -> MetricReport:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.ndim == 1:
        predicted, actual = predicted[None], actual[None]
        validity = None if validity is None else np.asarray(validity)[None]
    if predicted.shape != actual.shape:
        raise ConfigurationError(f"prediction shape {predicted.shape} != actual shape {actual.shape}")
    valid = np.isfinite(actual) if validity is None else np.asarray(validity, dtype=bool) & np.isfinite(actual)
    if not valid.any():
        raise ConfigurationError("no cell with ground truth")
    if not np.isfinite(predicted[valid]).all():
        raise ConfigurationError("prediction missing for a cell with ground truth")

    err = np.where(valid, predicted - actual, 0.0)
    abs_err = np.abs(err)
    n = int(valid.sum())
    mape_ok = valid & (actual != 0)
    n_mape = int(mape_ok.sum())
    rel = np.where(mape_ok, abs_err / np.where(mape_ok, np.abs(actual), 1.0), 0.0)

    per_trip_n = valid.sum(axis=1)
    has = per_trip_n > 0
    per_trip_rmse = np.sqrt((err**2).sum(axis=1)[has] / per_trip_n[has])

    col_n = valid.sum(axis=0)
    col_m = mape_ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_stop_mae = abs_err.sum(axis=0) / col_n
        per_stop_mape = rel.sum(axis=0) / col_m * 100.0
        per_stop_rmse = np.sqrt((err**2).sum(axis=0) / col_n)

    return MetricReport(
        mape=float(rel.sum() / n_mape * 100.0) if n_mape else float("nan"),
        mae=float(abs_err.sum() / n),
        rmse=float(per_trip_rmse.mean()),
        rmse_pooled=float(np.sqrt((err**2).sum() / n)),
        n_cells=n,
        n_mape_cells=n_mape,
        n_excluded=n - n_mape,
        per_stop_mae=per_stop_mae,
        per_stop_mape=per_stop_mape,
        per_stop_rmse=per_stop_rmse,
    )


# -- baselines ---------------------------------------------------------------------


class HistoricalMeanBaseline:
    """Mean travel time per (trip slot, segment) over the training days.

    Slots never seen (or seen only as missing) fall back to the segment mean.
    """

    name = "historical-mean"

    def __init__(self, train_days: Sequence[DayMatrix]):
        if not train_days:
            raise ConfigurationError("historical mean needs training days")
        K = train_days[0].n_segments
        T = max(d.n_trips for d in train_days)
        total = np.zeros((T, K))
        count = np.zeros((T, K))
        for d in train_days:
            ok = ~d.missing
            total[: d.n_trips][ok] += d.travel_times[ok]
            count[: d.n_trips] += ok
        seg_count = count.sum(axis=0)
        if (seg_count == 0).any():
            raise ConfigurationError("a segment has no training observation")
        self.segment_mean = total.sum(axis=0) / seg_count
        with np.errstate(invalid="ignore", divide="ignore"):
            slot = total / count
        self.slot_mean = np.where(count > 0, slot, self.segment_mean)

    def predict(self, slot: int, segment: int) -> float:
        """Prediction for 0-based trip slot and segment."""
        if slot < len(self.slot_mean):
            return float(self.slot_mean[slot, segment])
        return float(self.segment_mean[segment])

    def predict_day(self, day: DayMatrix) -> np.ndarray:
        T = day.n_trips
        out = np.tile(self.segment_mean, (T, 1))
        n = min(T, len(self.slot_mean))
        out[:n] = self.slot_mean[:n]
        return out


def fit_ar(series_list: Sequence[np.ndarray], p: int, intercept: bool = False):
    """Least-squares AR(p) coefficients from one or more series.

    Lag vectors containing a missing value are skipped. Returns
    ``(coefficients, intercept_value)``; coefficients are ordered
    lag 1 (most recent) first.

    Raises:
        ConfigurationError: if no series is longer than ``p``.
        np.linalg.LinAlgError: if the normal equations are singular.
    """
    if p < 1:
        raise ConfigurationError("AR order must be >= 1")
    rows, targets = [], []
    for s in series_list:
        s = np.asarray(s, dtype=np.float64)
        for t in range(p, len(s)):
            lags = s[t - p : t][::-1]
            if np.isfinite(lags).all() and np.isfinite(s[t]):
                rows.append(lags)
                targets.append(s[t])
    if not any(len(s) > p for s in series_list):
        raise ConfigurationError(f"AR order {p} needs a series longer than {p}")
    if not rows:
        raise np.linalg.LinAlgError("no complete lag vector")
    A = np.asarray(rows)
    if intercept:
        A = np.hstack([A, np.ones((len(A), 1))])
    y = np.asarray(targets)
    gram = A.T @ A
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations")
    coef = np.linalg.solve(gram, A.T @ y)
    if intercept:
        return coef[:-1], float(coef[-1])
    return coef, 0.0


def ar_predict_next(series, coef, intercept=0.0) -> float:
    p = len(coef)
    lags = np.asarray(series, dtype=np.float64)[-p:][::-1]
    return float(lags @ coef + intercept)


class ARBaseline:
    """Per-segment AR(p) over the across-trip series of each day.

    Predicts trip ``tau`` from trips ``tau-p..tau-1`` of the same day. Trips
    without a complete lag window, and segments whose fit is singular, use
    the historical mean instead; such segments are listed in ``fallback``.
    """

    def __init__(self, train_days: Sequence[DayMatrix], p: int = 1, intercept: bool = True):
        self.p = p
        self.name = f"AR({p})"
        self.intercept = intercept
        self.history = HistoricalMeanBaseline(train_days)
        K = train_days[0].n_segments
        if all(d.n_trips <= p for d in train_days):
            raise ConfigurationError(f"AR order {p} needs days with more than {p} trips")
        self.coef = np.zeros((K, p))
        self.const = np.zeros(K)
        self.fallback = []
        for k in range(K):
            try:
                c, b = fit_ar([d.travel_times[:, k] for d in train_days], p, intercept)
                self.coef[k], self.const[k] = c, b
            except np.linalg.LinAlgError:
                log.warning("AR(%d) fit singular for segment %d; using historical mean", p, k + 1)
                self.fallback.append(k)

    def predict_day(self, day: DayMatrix) -> np.ndarray:
        out = self.history.predict_day(day)
        t = day.travel_times
        for tau in range(self.p, day.n_trips):
            lags = t[tau - self.p : tau][::-1]  # (p, K), lag 1 first
            pred = (lags * self.coef.T).sum(axis=0) + self.const
            ok = np.isfinite(lags).all(axis=0)
            ok[self.fallback] = False
            out[tau, ok] = pred[ok]
        return out


class ExternalPredictions:
    """Predictions read from a ``service_date,trip_index,segment_index,predicted_seconds`` CSV.

    ``trip_index`` and ``segment_index`` are 1-based positions in the day matrix.
    """

    def __init__(self, values: Mapping, name: str = "external"):
        self.values = dict(values)
        self.name = name

    @classmethod
    def from_csv(cls, path, name: str | None = None) -> "ExternalPredictions":
        values = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            expected = ["service_date", "trip_index", "segment_index", "predicted_seconds"]
            if reader.fieldnames != expected:
                raise ConfigurationError(f"bad header {reader.fieldnames}; expected {','.join(expected)}")
            for row in reader:
                key = (date.fromisoformat(row["service_date"]), int(row["trip_index"]), int(row["segment_index"]))
                values[key] = float(row["predicted_seconds"])
        return cls(values, name=name or "external")

    def predict_day(self, day: DayMatrix) -> np.ndarray:
        out = np.full(day.travel_times.shape, np.nan)
        for tau in range(day.n_trips):
            for k in range(day.n_segments):
                v = self.values.get((day.service_date, tau + 1, k + 1))
                if v is not None:
                    out[tau, k] = v
        return out


def write_external_predictions(days: Sequence[DayMatrix], predictions: Sequence[np.ndarray], dest) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["service_date", "trip_index", "segment_index", "predicted_seconds"])
        for day, pred in zip(days, predictions):
            for tau in range(day.n_trips):
                for k in range(day.n_segments):
                    if np.isfinite(pred[tau, k]):
                        writer.writerow([day.service_date.isoformat(), tau + 1, k + 1, repr(float(pred[tau, k]))])


# -- benchmark ------------------------------------------------------------------------


@dataclass
class BenchmarkRow:
    route: str
    predictor: str
    mode: str  # "one-step" or "trip-start"
    report: MetricReport


class CoverageError(ConfigurationError):
    def __init__(self, predictor, cells):
        self.predictor = predictor
        self.cells = cells
        shown = ", ".join(f"{d}/trip {t}/seg {k}" for d, t, k in cells[:10])
        more = f" (+{len(cells) - 10} more)" if len(cells) > 10 else ""
        super().__init__(f"{predictor} leaves {len(cells)} test cells uncovered: {shown}{more}")


def _collect(days, preds):
    actual = np.vstack([d.travel_times for d in days])
    valid = np.vstack([~d.missing for d in days])
    return np.vstack(preds), actual, valid


def _check_coverage(name, days, preds):
    missing = []
    for d, p in zip(days, preds):
        for t, k in zip(*np.nonzero(~d.missing & ~np.isfinite(p))):
            missing.append((d.service_date, int(t) + 1, int(k) + 1))
    if missing:
        raise CoverageError(name, missing)


def run_benchmark(
    checkpoint: Checkpoint | None,
    baselines: Sequence,
    test_days: Sequence[DayMatrix],
    trip_start: bool = True,
) -> list[BenchmarkRow]:
    """Compare the mask-CNN in session-replay mode with baseline predictors.

    One-step rows score every valid (trip, segment) of ``test_days``: the
    mask-CNN predicts segment k+1 after observing 1..k. Trip-start rows score
    predictions made before the trip leaves (greedy rollout, no prefix).
    Baselines must expose ``name`` and ``predict_day(day)``; they do not use
    the live prefix, so their trip-start rows equal their one-step rows.
    """
    if not test_days:
        raise ConfigurationError("no test days")
    route = test_days[0].route_id
    predictors = []
    if checkpoint is not None:
        predictors.append(("mask-CNN", [one_step_predictions(checkpoint, d) for d in test_days],
                           [rollout_predictions(checkpoint, d) for d in test_days] if trip_start else None))
    for b in baselines:
        preds = [b.predict_day(d) for d in test_days]
        predictors.append((b.name, preds, preds))
    rows = []
    for name, one_step, start in predictors:
        _check_coverage(name, test_days, one_step)
        rows.append(BenchmarkRow(route, name, "one-step", compute_metrics(*_collect(test_days, one_step))))
    if trip_start:
        for name, _, start in predictors:
            rows.append(BenchmarkRow(route, name, "trip-start", compute_metrics(*_collect(test_days, start))))
    return rows


REPORT_FIELDS = ["route", "predictor", "mode", "MAPE_pct", "MAE_s", "RMSE_s", "RMSE_pooled_s", "n_cells"]


def write_benchmark_report(rows: Sequence[BenchmarkRow], dest) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in rows:
            m = r.report
            writer.writerow([r.route, r.predictor, r.mode, f"{m.mape:.3f}", f"{m.mae:.2f}",
                             f"{m.rmse:.2f}", f"{m.rmse_pooled:.2f}", m.n_cells])


def format_table(rows: Sequence[BenchmarkRow]) -> str:
    lines = [f"{'predictor':<20}{'mode':<12}{'MAPE (%)':>10}{'MAE (s)':>10}{'RMSE (s)':>10}"]
    for r in rows:
        m = r.report
        lines.append(f"{r.predictor:<20}{r.mode:<12}{m.mape:>10.3f}{m.mae:>10.2f}{m.rmse:>10.2f}")
    return "\n".join(lines)
