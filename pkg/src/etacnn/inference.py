"""Sequential ETA prediction for a trip in progress.

The network sees an H x K window: the H-1 most recent completed trips of the
same day on top, the current trip in the bottom row. Observed segments of the
current trip are written into that row as they happen; the remaining cells are
predicted greedily one at a time (argmax, or a draw from the softmax in
sampling mode), each prediction written back before the next one is made.

Cells nobody has observed yet hold the per-segment training-median class.
By causality their value never influences a prediction at an earlier raster
position, but it has to be defined and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from etacnn import nncore
from etacnn.checkpoint import Checkpoint
from etacnn.dataio import DayMatrix, QuantizedWindow, dequantize, quantize
from etacnn.errors import ConfigurationError, DomainError, SequencingError


@dataclass(frozen=True)
class SegmentPrediction:
    segment: int  # 1-based
    cls: int
    seconds: float
    arrival_offset: float  # seconds from the current stop to the end of this segment

    def as_dict(self) -> dict:
        return {"segment": self.segment, "seconds": self.seconds, "arrival_offset": self.arrival_offset}


def fill_invalid(classes, validity, fill) -> np.ndarray:
    """Replace invalid cells with the per-segment fill class (broadcast over rows)."""
    classes = np.asarray(classes)
    return np.where(validity, classes, np.broadcast_to(fill, classes.shape)).astype(np.int64)


def context_block(checkpoint: Checkpoint, context_trips=None) -> np.ndarray:
    """(H-1, K) classes from completed trips, newest last, median-padded on top."""
    H, K = checkpoint.config.window, checkpoint.config.segments
    fill = checkpoint.fill_classes
    block = np.tile(fill, (H - 1, 1)).astype(np.int64)
    if context_trips is None:
        return block
    ctx = np.asarray(context_trips, dtype=np.float64)
    if ctx.size == 0:
        return block
    if ctx.ndim == 1:
        ctx = ctx[None]
    if ctx.shape[1] != K:
        raise ConfigurationError(f"context has {ctx.shape[1]} segments, checkpoint expects {K}")
    ctx = ctx[-(H - 1):] if H > 1 else ctx[:0]
    cls = quantize(ctx, checkpoint.quantizer, mode="clamp")
    cls = fill_invalid(cls, cls >= 0, fill)
    if len(cls):
        block[H - 1 - len(cls):] = cls
    return block


def _pick(probs_or_logits, mode, rng):
    if mode == "argmax":
        return int(np.argmax(probs_or_logits))
    p = nncore.softmax(probs_or_logits)
    return int(rng.choice(len(p), p=p / p.sum()))


@dataclass
class TripSession:
    checkpoint: Checkpoint
    context: np.ndarray  # (H-1, K) classes
    observed: list = field(default_factory=list)  # observed classes, segments 1..k
    observed_seconds: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    mode: str = "argmax"
    rng: np.random.Generator | None = None

    @property
    def current_stop(self) -> int:
        return len(self.observed)

    @property
    def segments(self) -> int:
        return self.checkpoint.config.segments

    def current_row(self) -> np.ndarray:
        row = self.checkpoint.fill_classes.astype(np.int64).copy()
        row[: self.current_stop] = self.observed
        return row

    def eta(self) -> list[dict]:
        return [p.as_dict() for p in self.predictions]


def start_session(checkpoint: Checkpoint, context_trips=None, mode: str = "argmax", seed=None) -> TripSession:
    """Open a session for a trip that has not left the origin yet.

    ``context_trips`` are the day's completed trips as seconds (rows oldest
    first, NaN for missing cells); fewer than H-1 rows are padded on top.
    """
    if mode not in ("argmax", "sample"):
        raise ConfigurationError(f"unknown prediction mode {mode!r}")
    session = TripSession(
        checkpoint=checkpoint,
        context=context_block(checkpoint, context_trips),
        mode=mode,
        rng=np.random.default_rng(seed) if mode == "sample" else None,
    )
    session.predictions = predict_remaining(session)
    return session


def observe(session: TripSession, segment: int, travel_time: float) -> TripSession:
    """Record the travel time of the next segment and refresh predictions."""
    k = session.current_stop
    if segment != k + 1:
        raise SequencingError(f"expected segment {k + 1}, got {segment}")
    if segment > session.segments:
        raise SequencingError(f"segment {segment} beyond the last segment {session.segments}")
    travel_time = float(travel_time)
    if not np.isfinite(travel_time) or travel_time < 0:
        raise DomainError(f"travel time must be finite and non-negative, got {travel_time}")
    session.observed.append(quantize(travel_time, session.checkpoint.quantizer, mode="clamp"))
    session.observed_seconds.append(travel_time)
    session.predictions = predict_remaining(session)
    return session


def predict_remaining(session: TripSession) -> list[SegmentPrediction]:
    """Greedy rollout over segments ``k+1..K``."""
    cp = session.checkpoint
    H, K = cp.config.window, cp.config.segments
    k = session.current_stop
    window = np.vstack([session.context, session.current_row()[None]])
    out = []
    offset = 0.0
    for col in range(k, K):
        logits = cp.model.forward(window)[:, H - 1, col]
        cls = _pick(logits, session.mode, session.rng)
        window[H - 1, col] = cls
        seconds = dequantize(cls, cp.quantizer)
        offset += seconds
        out.append(SegmentPrediction(col + 1, cls, seconds, offset))
    return out


def predict_position(checkpoint: Checkpoint, window, row: int, col: int) -> np.ndarray:
    """Class distribution at ``(row, col)`` of a window (0-based coordinates).

    ``window`` is a QuantizedWindow (invalid cells get the fill class) or an
    H x K array of classes.
    """
    if isinstance(window, QuantizedWindow):
        classes = fill_invalid(window.classes, window.validity, checkpoint.fill_classes)
    else:
        classes = np.asarray(window, dtype=np.int64)
    H, K = classes.shape
    if not (0 <= row < H and 0 <= col < K):
        raise DomainError(f"position ({row}, {col}) outside a {H}x{K} window")
    return nncore.softmax(checkpoint.model.forward(classes)[:, row, col])


# -- batched replay over whole days ---------------------------------------------


def replay_windows(checkpoint: Checkpoint, day: DayMatrix) -> np.ndarray:
    """One H x K input per trip of ``day``: its context trips plus itself.

    Returns ``(T, H, K)`` classes; the bottom row holds the trip's own values
    (clamped, missing cells filled), trips before the first are median rows.
    """
    H, K = checkpoint.config.window, checkpoint.config.segments
    if day.n_segments != K:
        raise ConfigurationError(f"day has {day.n_segments} segments, checkpoint expects {K}")
    fill = checkpoint.fill_classes
    cls = quantize(day.travel_times, checkpoint.quantizer, mode="clamp")
    cls = fill_invalid(cls, cls >= 0, fill)
    padded = np.vstack([np.tile(fill, (H - 1, 1)), cls])
    return np.stack([padded[t : t + H] for t in range(day.n_trips)])


def _forward_chunks(checkpoint, windows, chunk=64):
    for s in range(0, len(windows), chunk):
        yield s, checkpoint.model.forward(windows[s : s + chunk])


def one_step_predictions(checkpoint: Checkpoint, day: DayMatrix, chunk: int = 64) -> np.ndarray:
    """Predicted seconds for every (trip, segment) given the true prefix.

    This equals session replay: segment k+1 is predicted after observing
    segments 1..k of the trip. Causality lets one forward pass per window
    deliver all K of those predictions at once.
    """
    H = checkpoint.config.window
    windows = replay_windows(checkpoint, day)
    pred = np.empty(windows.shape[0:1] + windows.shape[2:], dtype=np.int64)
    for s, logits in _forward_chunks(checkpoint, windows, chunk):
        pred[s : s + logits.shape[1]] = logits[:, :, H - 1, :].argmax(axis=0)
    return dequantize(pred, checkpoint.quantizer)


def rollout_predictions(checkpoint: Checkpoint, day: DayMatrix, prefix: int = 0,
                        until: int | None = None, chunk: int = 64) -> np.ndarray:
    """Greedy rollout for every trip with the first ``prefix`` segments observed.

    Returns ``(T, K)`` seconds; observed columns and columns past ``until``
    (1-based, inclusive) are NaN.
    """
    H, K = checkpoint.config.window, checkpoint.config.segments
    until = K if until is None else until
    windows = replay_windows(checkpoint, day)
    windows[:, H - 1, prefix:] = checkpoint.fill_classes[prefix:]
    out = np.full((day.n_trips, K), np.nan)
    for col in range(prefix, until):
        for s in range(0, len(windows), chunk):
            logits = checkpoint.model.forward(windows[s : s + chunk])
            windows[s : s + chunk, H - 1, col] = logits[:, :, H - 1, col].argmax(axis=0)
        out[:, col] = dequantize(windows[:, H - 1, col], checkpoint.quantizer)
    return out
