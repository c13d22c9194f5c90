"""Stop events, day matrices, quantization, windowing and synthetic routes.

Stop indices run from 0 (the origin terminal) to K. Segment ``k`` spans stops
``k-1`` and ``k``; its travel time is ``arrival(k) - arrival(k-1)`` so that
dwell at the upstream stop is included, except for segment 1 which starts at
the origin's departure. A missing stop event leaves both adjacent segments
missing; nothing is interpolated.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from etacnn.errors import ConfigurationError, DomainError, IngestionError

log = logging.getLogger(__name__)

EVENT_FIELDS = ["route_id", "service_date", "trip_index", "stop_index", "arrival_ts", "departure_ts"]


@dataclass(frozen=True)
class StopEvent:
    route_id: str
    service_date: date
    trip_index: int
    stop_index: int
    arrival_time: float | None
    departure_time: float | None


@dataclass
class DayMatrix:
    """Travel times (seconds) of one service day, trips x segments.

    Missing cells hold NaN in ``travel_times`` and True in ``missing``.
    """

    travel_times: np.ndarray
    route_id: str = ""
    service_date: date | None = None
    trip_ids: list[int] | None = None
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.array(self.travel_times, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ConfigurationError(f"day matrix must be 2-D and non-empty, got shape {t.shape}")
        miss = ~np.isfinite(t) if self.missing is None else np.array(self.missing, dtype=bool)
        if miss.shape != t.shape:
            raise ConfigurationError("missing mask shape differs from travel-time shape")
        t[miss] = np.nan
        if (t[~miss] < 0).any() or not np.isfinite(t[~miss]).all():
            raise ConfigurationError("present travel times must be finite and non-negative")
        self.travel_times = t
        self.missing = miss
        if self.trip_ids is None:
            self.trip_ids = list(range(1, t.shape[0] + 1))

    @property
    def n_trips(self) -> int:
        return self.travel_times.shape[0]

    @property
    def n_segments(self) -> int:
        return self.travel_times.shape[1]


# -- stop-event ingestion -------------------------------------------------


def parse_timestamp(text: str) -> float | None:
    """Epoch seconds from an ISO-8601 string or a plain number; None when empty."""
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        stamp = datetime.fromisoformat(text)
    except ValueError as exc:
        raise IngestionError(f"unparseable timestamp {text!r}") from exc
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def read_events_csv(source) -> list[StopEvent]:
    """Read the stop-event CSV; ``source`` is a path or a text stream."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_events_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        raise IngestionError("empty event file")
    if [h.strip() for h in header] != EVENT_FIELDS:
        raise IngestionError(f"bad header {header!r}; expected {','.join(EVENT_FIELDS)}")
    events = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(EVENT_FIELDS):
            raise IngestionError(f"line {lineno}: expected {len(EVENT_FIELDS)} fields, got {len(row)}")
        try:
            events.append(
                StopEvent(
                    route_id=row[0].strip(),
                    service_date=date.fromisoformat(row[1].strip()),
                    trip_index=int(row[2]),
                    stop_index=int(row[3]),
                    arrival_time=parse_timestamp(row[4]),
                    departure_time=parse_timestamp(row[5]),
                )
            )
        except ValueError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from exc
    if not events:
        raise IngestionError("event file has no records")
    return events


def _fmt(value):
    return "" if value is None else f"{value:.3f}"


def write_events_csv(events: Iterable[StopEvent], dest) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_events_csv(events, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(EVENT_FIELDS)
    for ev in events:
        writer.writerow(
            [
                ev.route_id,
                ev.service_date.isoformat(),
                ev.trip_index,
                ev.stop_index,
                _fmt(ev.arrival_time),
                _fmt(ev.departure_time),
            ]
        )


def ingest_events(records: Iterable[StopEvent], rejected: list | None = None) -> list[DayMatrix]:
    """Assemble stop events into one DayMatrix per (route, service date).

    Records with departure before arrival, or whose arrival precedes the
    previous stop's, are rejected, logged, and appended to ``rejected`` when
    given. K is the largest stop index seen on the route.

    Raises:
        IngestionError: on a duplicate (route, date, trip, stop) record.
    """
    by_key: dict = {}
    max_stop: dict = defaultdict(int)
    for ev in records:
        key = (ev.route_id, ev.service_date, ev.trip_index, ev.stop_index)
        if key in by_key:
            raise IngestionError(f"duplicate stop event {key}")
        if ev.stop_index < 0:
            raise IngestionError(f"negative stop index in {key}")
        by_key[key] = ev
        max_stop[ev.route_id] = max(max_stop[ev.route_id], ev.stop_index)

    def reject(ev, reason):
        log.warning("rejected %s/%s trip %s stop %s: %s", ev.route_id, ev.service_date,
                    ev.trip_index, ev.stop_index, reason)
        if rejected is not None:
            rejected.append((ev, reason))

    trips: dict = defaultdict(dict)
    for key in sorted(by_key):
        ev = by_key[key]
        if (ev.arrival_time is not None and ev.departure_time is not None
                and ev.departure_time < ev.arrival_time):
            reject(ev, "departure before arrival")
            continue
        trips[key[:3]][ev.stop_index] = ev

    days: dict = defaultdict(dict)
    for (route, day, trip), stops in trips.items():
        n_seg = max_stop[route]
        if n_seg < 1:
            raise IngestionError(f"route {route} has no segment (max stop index 0)")
        row = np.full(n_seg, np.nan)
        # reference time at each stop index: departure at the origin, arrival elsewhere
        ref = {}
        for k in sorted(stops):
            ev = stops[k]
            ref[k] = ev.departure_time if k == 0 else ev.arrival_time
        prev_ok = None
        for k in sorted(ref):
            if ref[k] is None:
                continue
            if k - 1 in ref and ref[k - 1] is not None and k - 1 == prev_ok:
                dt = ref[k] - ref[k - 1]
                if dt < 0:
                    reject(stops[k], f"negative travel time {dt:.3f} s")
                    continue
                row[k - 1] = dt
            prev_ok = k
        days[(route, day)][trip] = row

    out = []
    for (route, day) in sorted(days):
        rows = days[(route, day)]
        ids = sorted(rows)
        out.append(DayMatrix(np.vstack([rows[i] for i in ids]), route_id=route,
                             service_date=day, trip_ids=ids))
    return out


# -- day-matrix files ---------------------------------------------------------


def day_matrix_filename(day: DayMatrix) -> str:
    stamp = day.service_date.isoformat() if day.service_date else "undated"
    return f"{day.route_id or 'route'}__{stamp}.csv"


def write_day_matrix(day: DayMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"seg_{k}" for k in range(1, day.n_segments + 1)])
        for row in day.travel_times:
            writer.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])


def read_day_matrix(path) -> DayMatrix:
    """Read a day-matrix CSV; route and date come from a ``<route>__<date>.csv`` name."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigurationError(f"{path}: no trip rows")
    n_seg = len(rows[0])
    data = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != n_seg:
            raise ConfigurationError(f"{path}:{i}: expected {n_seg} fields")
        data.append([float(v) if v.strip() else np.nan for v in row])
    route, service_date = "", None
    stem = path.stem
    if "__" in stem:
        route, _, stamp = stem.rpartition("__")
        try:
            service_date = date.fromisoformat(stamp)
        except ValueError:
            route = stem
    return DayMatrix(np.array(data), route_id=route, service_date=service_date)


def read_day_matrices(path) -> list[DayMatrix]:
    """Read a single matrix file or every ``*.csv`` in a directory, by date."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise ConfigurationError(f"no day-matrix files in {path}")
        days = [read_day_matrix(f) for f in files]
    elif path.is_file():
        days = [read_day_matrix(path)]
    else:
        raise ConfigurationError(f"no such file or directory: {path}")
    return sorted(days, key=lambda d: (d.service_date or date.min, d.route_id))


# -- quantization -------------------------------------------------------------


@dataclass(frozen=True)
class Quantizer:
    """Uniform bins of width ``level`` seconds over ``[0, t_max)``."""

    level: float = 2.0
    t_max: float = 1024.0

    def __post_init__(self):
        if self.level <= 0 or self.t_max <= 0:
            raise ConfigurationError("level and t_max must be positive")
        ratio = self.t_max / self.level
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError(f"t_max {self.t_max} is not divisible by level {self.level}")

    @classmethod
    def from_classes(cls, classes: int, t_max: float = 1024.0) -> "Quantizer":
        return cls(level=t_max / classes, t_max=t_max)

    @property
    def classes(self) -> int:
        return int(round(self.t_max / self.level))


def quantize(t, q: Quantizer, mode: str = "clamp"):
    """Class index ``floor(t / level)``.

    Values at or above ``t_max`` become class ``C-1`` under ``mode="clamp"``
    and missing (``None``, or -1 in array form) under ``mode="missing"``.
    Accepts a scalar or an array; arrays pass NaN through as -1.
    """
    if mode not in ("clamp", "missing"):
        raise ConfigurationError(f"unknown quantize mode {mode!r}")
    if np.ndim(t) == 0:
        t = float(t)
        if math.isnan(t):
            return None
        if t < 0:
            raise DomainError(f"negative travel time {t}")
        if t >= q.t_max:
            return q.classes - 1 if mode == "clamp" else None
        return min(int(t // q.level), q.classes - 1)
    arr = np.asarray(t, dtype=np.float64)
    present = np.isfinite(arr)
    if (arr[present] < 0).any():
        raise DomainError("negative travel time")
    out = np.full(arr.shape, -1, dtype=np.int64)
    cls = np.floor(np.where(present, arr, 0.0) / q.level).astype(np.int64)
    over = present & (arr >= q.t_max)
    out[present] = np.minimum(cls[present], q.classes - 1)
    if mode == "missing":
        out[over] = -1
    return out


def dequantize(cls, q: Quantizer):
    """Bin midpoint ``(class + 0.5) * level`` in seconds."""
    arr = np.asarray(cls)
    if (arr < 0).any() or (arr >= q.classes).any():
        raise DomainError(f"class outside [0, {q.classes})")
    out = (arr + 0.5) * q.level
    return float(out) if np.ndim(cls) == 0 else out


# -- windows --------------------------------------------------------------------


@dataclass
class QuantizedWindow:
    """H consecutive trips of one day as class indices.

    ``classes`` holds -1 where ``validity`` is False; ``seconds`` keeps the raw
    travel times (NaN when missing) for error metrics. ``padded`` marks a
    window built from a day with fewer than H trips; its top rows are invalid.
    """

    classes: np.ndarray
    validity: np.ndarray
    seconds: np.ndarray
    service_date: date | None = None
    first_trip: int = 0
    padded: bool = False

    @property
    def shape(self):
        return self.classes.shape


def make_windows(day: DayMatrix, H: int, q: Quantizer, mode: str = "missing") -> list[QuantizedWindow]:
    """Stride-1 windows of H consecutive trips; ``T - H + 1`` of them.

    Training windows use ``mode="missing"`` so that outliers above ``t_max``
    drop out of the loss. A day with fewer than H trips yields one window
    whose top rows are padding (invalid) and which is flagged ``padded``.
    """
    if H < 1:
        raise ConfigurationError("window height must be positive")
    classes = quantize(day.travel_times, q, mode=mode)
    valid = classes >= 0
    seconds = day.travel_times
    T = day.n_trips
    if T < H:
        log.warning("day %s has %d trips < H=%d; emitting one padded window", day.service_date, T, H)
        pad = H - T
        cls = np.vstack([np.full((pad, day.n_segments), -1, dtype=np.int64), classes])
        val = np.vstack([np.zeros((pad, day.n_segments), dtype=bool), valid])
        sec = np.vstack([np.full((pad, day.n_segments), np.nan), seconds])
        return [QuantizedWindow(cls, val, sec, day.service_date, 0, padded=True)]
    return [
        QuantizedWindow(classes[s : s + H].copy(), valid[s : s + H].copy(), seconds[s : s + H].copy(),
                        day.service_date, s)
        for s in range(T - H + 1)
    ]


def split_train_test(days: Sequence[DayMatrix], boundary: date):
    """Chronological split: dates before ``boundary`` train, the rest test."""
    if not days:
        raise ConfigurationError("no days to split")
    ordered = sorted(days, key=lambda d: d.service_date)
    train = [d for d in ordered if d.service_date < boundary]
    test = [d for d in ordered if d.service_date >= boundary]
    if not train or not test:
        raise ConfigurationError(
            f"split at {boundary} leaves an empty partition ({len(train)} train, {len(test)} test)"
        )
    return train, test


# -- synthetic routes -----------------------------------------------------------


def rush_hour_profile(trips_per_day: int, peak: float = 1.6, width: float = 0.08,
                      centers: tuple[float, ...] = (0.25, 0.7)) -> np.ndarray:
    """Per-trip-slot multipliers with Gaussian bumps at morning/evening peaks."""
    pos = (np.arange(trips_per_day) + 0.5) / trips_per_day
    mult = np.ones(trips_per_day)
    for c in centers:
        mult += (peak - 1.0) * np.exp(-0.5 * ((pos - c) / width) ** 2)
    return mult


@dataclass
class SyntheticRoute:
    """Generator settings. ``congestion_sd`` is the stationary standard
    deviation of the log-congestion process and ``segment_correlation`` the
    correlation of its innovations between neighbouring segments."""

    segments: int = 20
    trips_per_day: int = 40
    days: int = 90
    base_profile: Sequence[float] | None = None
    rush_multiplier: Sequence[float] | None = None
    trip_persistence: float = 0.8
    noise_sd: float = 5.0
    missing_rate: float = 0.0
    congestion_sd: float = 0.25
    segment_correlation: float = 0.7
    route_id: str = "R1"
    start_date: date = date(2019, 1, 1)
    headway: float = 1200.0
    first_departure: float = 6 * 3600.0
    seed: int = 0

    def validate(self):
        if self.segments < 1 or self.trips_per_day < 1 or self.days < 1:
            raise ConfigurationError("segments, trips_per_day and days must be positive")
        if not 0.0 <= self.trip_persistence < 1.0:
            raise ConfigurationError(f"trip_persistence must lie in [0, 1), got {self.trip_persistence}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigurationError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.noise_sd < 0 or self.congestion_sd < 0:
            raise ConfigurationError("noise_sd and congestion_sd must be non-negative")
        if not -1.0 < self.segment_correlation < 1.0:
            raise ConfigurationError("segment_correlation must lie in (-1, 1)")
        if self.base_profile is not None and len(self.base_profile) != self.segments:
            raise ConfigurationError("base_profile length must equal segments")
        if self.rush_multiplier is not None and len(self.rush_multiplier) != self.trips_per_day:
            raise ConfigurationError("rush_multiplier length must equal trips_per_day")

    def base(self) -> np.ndarray:
        if self.base_profile is not None:
            return np.asarray(self.base_profile, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 1])
        return np.round(rng.uniform(60.0, 200.0, self.segments))

    def rush(self) -> np.ndarray:
        if self.rush_multiplier is not None:
            return np.asarray(self.rush_multiplier, dtype=np.float64)
        return rush_hour_profile(self.trips_per_day)


def synthetic_matrices(cfg: SyntheticRoute) -> tuple[list[np.ndarray], np.random.Generator]:
    """Travel-time matrices (days, trips, segments) before events are emitted."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    base, rush = cfg.base(), cfg.rush()
    rho, corr = cfg.trip_persistence, cfg.segment_correlation
    K, T = cfg.segments, cfg.trips_per_day
    innov_sd = cfg.congestion_sd * math.sqrt(1.0 - rho * rho)
    out = []
    for _ in range(cfg.days):
        z = rng.normal(0.0, cfg.congestion_sd, K) if cfg.congestion_sd > 0 else np.zeros(K)
        day = np.empty((T, K))
        for tau in range(T):
            if tau > 0:
                # innovations correlated along the route so that a trip's early
                # segments carry information about its later ones
                e = rng.normal(0.0, 1.0, K)
                u = np.empty(K)
                u[0] = e[0]
                for k in range(1, K):
                    u[k] = corr * u[k - 1] + math.sqrt(1.0 - corr * corr) * e[k]
                z = rho * z + innov_sd * u
            noise = rng.normal(0.0, cfg.noise_sd, K) if cfg.noise_sd > 0 else 0.0
            day[tau] = np.maximum(base * rush[tau] * np.exp(z) + noise, 1.0)
        out.append(day)
    return out, rng


def generate_synthetic(cfg: SyntheticRoute) -> list[StopEvent]:
    """Stop-event stream for a synthetic route, deterministic given ``cfg.seed``.

    Travel times follow ``base_k * rush(trip) * congestion(trip, k) + noise``
    where log-congestion is an order-1 autoregression across trips per segment
    with coefficient ``trip_persistence``. Each stop event is dropped with probability ``1 - sqrt(1 - missing_rate)`` so that a segment
    (which needs two events) goes missing with probability ``missing_rate``.
    """
    days, rng = synthetic_matrices(cfg)
    drop_p = 1.0 - math.sqrt(1.0 - cfg.missing_rate)
    events = []
    epoch0 = datetime(cfg.start_date.year, cfg.start_date.month, cfg.start_date.day,
                      tzinfo=timezone.utc).timestamp()
    for d, mat in enumerate(days):
        service_date = date.fromordinal(cfg.start_date.toordinal() + d)
        day_start = epoch0 + d * 86400.0
        for tau, row in enumerate(mat):
            depart = day_start + cfg.first_departure + tau * cfg.headway
            drops = rng.random(cfg.segments + 1) < drop_p
            if not drops[0]:
                events.append(StopEvent(cfg.route_id, service_date, tau + 1, 0, None, depart))
            arrival = depart
            for k in range(1, cfg.segments + 1):
                arrival = arrival + row[k - 1]
                if drops[k]:
                    continue
                dwell = 0.0 if k == cfg.segments else min(0.15 * row[k], 30.0)
                events.append(StopEvent(cfg.route_id, service_date, tau + 1, k, arrival, arrival + dwell))
    return events


def events_to_csv_text(events: Iterable[StopEvent]) -> str:
    buf = io.StringIO()
    write_events_csv(events, buf)
    return buf.getvalue()
