"""Training loop, grid-search tuning and the glue that produces checkpoints."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from etacnn import nncore
from etacnn.checkpoint import Checkpoint
from etacnn.dataio import DayMatrix, Quantizer, QuantizedWindow, dequantize, make_windows
from etacnn.errors import ConfigurationError, EmptyLossError, NumericError, TrainingDiverged
from etacnn.inference import fill_invalid, one_step_predictions
from etacnn.model import MaskedCNN, ModelConfig, build_model

log = logging.getLogger(__name__)

FULL_GRID = {"filters": (3, 5, 7), "masks": (1, 2, 3), "classes": (128, 256, 512)}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    max_epochs: int = 200
    early_stop_patience: int | None = 10
    validation_fraction: float = 0.1
    seed: int = 0
    max_iterations: int | None = None
    decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def fit_fill_classes(windows: Sequence[QuantizedWindow], n_classes: int) -> np.ndarray:
    """Per-segment lower median of the valid training classes."""
    stacked = np.concatenate([w.classes for w in windows])
    valid = np.concatenate([w.validity for w in windows])
    everything = stacked[valid]
    default = int(np.percentile(everything, 50, method="lower")) if everything.size else n_classes // 2
    fill = np.full(stacked.shape[1], default, dtype=np.int64)
    for k in range(stacked.shape[1]):
        col = stacked[valid[:, k], k]
        if col.size:
            fill[k] = int(np.percentile(col, 50, method="lower"))
    return fill


def _stack(windows, fill):
    X = np.stack([fill_invalid(w.classes, w.validity, fill) for w in windows])
    Y = np.stack([np.where(w.validity, w.classes, 0) for w in windows])
    V = np.stack([w.validity for w in windows])
    return X, Y, V


def split_validation(windows: Sequence[QuantizedWindow], fraction: float):
    """Hold out the latest service dates (or the latest windows for one date)."""
    dates = sorted({w.service_date for w in windows if w.service_date is not None})
    if len(dates) >= 2:
        n_val = min(len(dates) - 1, max(1, math.ceil(fraction * len(dates))))
        held = set(dates[-n_val:])
        train = [w for w in windows if w.service_date not in held]
        val = [w for w in windows if w.service_date in held]
        return train, val
    n_val = max(1, math.ceil(fraction * len(windows)))
    if n_val >= len(windows):
        return list(windows), list(windows)
    return list(windows[:-n_val]), list(windows[-n_val:])


def window_mape(model: MaskedCNN, quantizer: Quantizer, windows, fill) -> float:
    """MAPE (%) of teacher-forced predictions on the bottom row of each window.

    The bottom row is what a live session predicts: the trip under way with
    its H-1 predecessors as context and its own observed prefix.
    """
    if not windows:
        return float("nan")
    X, _, V = _stack(windows, fill)
    H = X.shape[1]
    errs = []
    for s in range(0, len(X), 64):
        logits = model.forward(X[s : s + 64])
        pred = dequantize(logits[:, :, H - 1, :].argmax(axis=0), quantizer)
        actual = np.stack([w.seconds[H - 1] for w in windows[s : s + 64]])
        ok = V[s : s + 64, H - 1] & np.isfinite(actual) & (actual != 0)
        errs.append(np.abs(pred[ok] - actual[ok]) / np.abs(actual[ok]))
    errs = np.concatenate(errs)
    return float(errs.mean() * 100.0) if errs.size else float("nan")


def mean_loss(model: MaskedCNN, windows, fill) -> float:
    """Mean cross-entropy per valid cell over ``windows``."""
    X, Y, V = _stack(windows, fill)
    total, count = 0.0, 0
    for s in range(0, len(X), 64):
        logits = model.forward(X[s : s + 64])
        n = int(V[s : s + 64].sum())
        if n:
            loss, _ = nncore.softmax_cross_entropy(logits, Y[s : s + 64], V[s : s + 64])
            total += loss * n
            count += n
    if not count:
        raise EmptyLossError("no valid cell")
    return total / count


def _checkpoint(model, quantizer, fill, state, history, tc):
    return Checkpoint(
        model=model,
        quantizer=quantizer,
        fill_classes=fill.copy(),
        optimizer={"name": "rmsprop", "learning_rate": state.learning_rate,
                   "decay": state.decay, "epsilon": state.epsilon},
        history=[dict(h) for h in history],
        train_config=asdict(tc),
    )


def train(
    windows: Sequence[QuantizedWindow],
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    quantizer: Quantizer | None = None,
    val_windows: Sequence[QuantizedWindow] | None = None,
    fill_classes: np.ndarray | None = None,
    init: MaskedCNN | None = None,
    on_epoch=None,
) -> Checkpoint:
    """Fit a mask-CNN on quantized windows with RMSprop.

    Each cell is a C-way classification given its raster-causal context;
    the loss is the mean cross-entropy over valid cells. After every epoch
    the bottom-row MAPE on ``val_windows`` (by default the latest dates held
    out of ``windows``) drives early stopping, and the parameters of the best
    epoch (latest among ties) are returned.

    Raises:
        ConfigurationError: no windows, or shapes/classes disagree with the config.
        TrainingDiverged: a non-finite loss; carries the last good checkpoint.
    """
    if not windows:
        raise ConfigurationError("no training windows")
    quantizer = quantizer or Quantizer.from_classes(model_config.classes)
    if quantizer.classes != model_config.classes:
        raise ConfigurationError(
            f"quantizer has {quantizer.classes} classes, model expects {model_config.classes}"
        )
    shape = (model_config.window, model_config.segments)
    if any(w.shape != shape for w in windows):
        raise ConfigurationError(f"every window must be {shape}")
    tc = train_config
    if val_windows is None:
        train_w, val_w = split_validation(list(windows), tc.validation_fraction)
    else:
        train_w, val_w = list(windows), list(val_windows)
    fill = fit_fill_classes(train_w, model_config.classes) if fill_classes is None else np.asarray(fill_classes)

    model = init.copy() if init is not None else build_model(model_config, seed=tc.seed)
    state = nncore.OptimizerState(tc.learning_rate, tc.decay, tc.epsilon)
    rng = np.random.default_rng(tc.seed)
    X, Y, V = _stack(train_w, fill)

    history = []
    best_mape, best_model, since_best = math.inf, model.copy(), 0
    last_good = _checkpoint(model.copy(), quantizer, fill, state, history, tc)
    iterations = 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(len(X))
        loss_sum, cell_sum = 0.0, 0
        for s in range(0, len(order), tc.batch_size):
            idx = order[s : s + tc.batch_size]
            n_valid = int(V[idx].sum())
            if n_valid == 0:
                continue
            try:
                loss, grads = model.loss_and_grad(X[idx], Y[idx], V[idx])
                if not math.isfinite(loss):
                    raise NumericError(f"loss became {loss}")
                nncore.rmsprop_step(model.parameters(), grads, state)
            except NumericError as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}, iteration {iterations + 1}: {exc}", last_good
                ) from exc
            loss_sum += loss * n_valid
            cell_sum += n_valid
            iterations += 1
            if tc.max_iterations is not None and iterations >= tc.max_iterations:
                break
        val_mape = window_mape(model, quantizer, val_w, fill)
        history.append({"epoch": epoch, "train_loss": loss_sum / max(cell_sum, 1),
                        "val_mape": val_mape, "iterations": iterations})
        log.info("epoch %d  loss %.4f  val MAPE %.3f%%", epoch, history[-1]["train_loss"], val_mape)
        if on_epoch is not None:
            on_epoch(history[-1])
        if math.isnan(val_mape) or val_mape <= best_mape:
            best_mape = val_mape if not math.isnan(val_mape) else best_mape
            best_model, since_best = model.copy(), 0
        else:
            since_best += 1
        last_good = _checkpoint(best_model, quantizer, fill, state, history, tc)
        if tc.max_iterations is not None and iterations >= tc.max_iterations:
            break
        if tc.early_stop_patience is not None and since_best >= tc.early_stop_patience:
            log.info("early stop after epoch %d", epoch)
            break
    return _checkpoint(best_model, quantizer, fill, state, history, tc)


# -- grid search ------------------------------------------------------------------


@dataclass
class TuneResult:
    best: ModelConfig | None
    table: list = field(default_factory=list)  # dicts: F, L, mask, C, val_MAPE
    failures: list = field(default_factory=list)  # (config, message)
    checkpoints: dict = field(default_factory=dict)


def _tie_key(row):
    return (row["val_MAPE"], row["C"], row["F"], row["mask"])


def day_mape(checkpoint: Checkpoint, days: Sequence[DayMatrix]) -> float:
    """One-step-ahead MAPE (%) over every valid cell of ``days``."""
    errs = []
    for day in days:
        pred = one_step_predictions(checkpoint, day)
        actual = day.travel_times
        ok = ~day.missing & (actual != 0)
        errs.append(np.abs(pred[ok] - actual[ok]) / np.abs(actual[ok]))
    errs = np.concatenate(errs)
    return float(errs.mean() * 100.0) if errs.size else float("nan")


def tune_grid(
    grid: dict,
    train_days: Sequence[DayMatrix],
    val_days: Sequence[DayMatrix],
    base_config: ModelConfig | None = None,
    train_config: TrainConfig = TrainConfig(),
    t_max: float = 1024.0,
    keep_checkpoints: bool = False,
) -> TuneResult:
    """Train every (filter size, mask variant, class count) combination alike.

    The filter size is used for both F and L. Each candidate is scored by its
    one-step-ahead MAPE on ``val_days``; the minimum wins, ties going to fewer
    classes, then the smaller filter, then the lower mask variant. Candidates
    that fail to train are dropped and listed in ``failures``.
    """
    filters, masks, classes = grid.get("filters", ()), grid.get("masks", ()), grid.get("classes", ())
    if not (filters and masks and classes):
        raise ConfigurationError("grid needs at least one filter size, mask variant and class count")
    if not train_days or not val_days:
        raise ConfigurationError("tuning needs training and validation days")
    K = train_days[0].n_segments
    base = base_config or ModelConfig(segments=K)
    result = TuneResult(best=None)
    for F, m, C in itertools.product(sorted(filters), sorted(masks), sorted(classes)):
        try:
            cfg = replace(base, first_filter=F, inner_filter=F, mask_variant=m, classes=C, segments=K)
            q = Quantizer.from_classes(C, t_max)
            windows = [w for d in train_days for w in make_windows(d, cfg.window, q)]
            cp = train(windows, cfg, train_config, quantizer=q)
            mape = day_mape(cp, val_days)
            if not math.isfinite(mape):
                raise NumericError("validation MAPE is not finite")
        except Exception as exc:  # one broken candidate must not sink the search
            log.warning("config F=%s mask=%s C=%s failed: %s", F, m, C, exc)
            result.failures.append(((F, m, C), str(exc)))
            continue
        result.table.append({"F": F, "L": F, "mask": m, "C": C, "val_MAPE": mape})
        if keep_checkpoints:
            result.checkpoints[(F, m, C)] = cp
        log.info("F=%d mask=%d C=%d  val MAPE %.3f%%", F, m, C, mape)
    if result.table:
        winner = min(result.table, key=_tie_key)
        result.best = replace(base, first_filter=winner["F"], inner_filter=winner["L"],
                              mask_variant=winner["mask"], classes=winner["C"], segments=K)
    return result


def write_tune_report(result: TuneResult, dest) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["F", "L", "mask", "C", "val_MAPE"])
        for row in result.table:
            writer.writerow([row["F"], row["L"], row["mask"], row["C"], f"{row['val_MAPE']:.5f}"])
        for (F, m, C), _ in result.failures:
            writer.writerow([F, F, m, C, ""])
