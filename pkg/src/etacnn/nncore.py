"""Numerical kernels: masked convolution, ReLU, softmax cross-entropy, RMSprop.

Feature maps are float64 arrays laid out ``(channels, batch, rows, cols)``.
Functions also accept a single map ``(channels, rows, cols)`` and return the
same rank they were given. Keeping channels leading lets every convolution be
one matrix product ``(out, in * taps) @ (in * taps, batch * rows * cols)``
without transposes.

Only the taps a mask admits are gathered, so masked weights take no part in
the arithmetic at all and their gradients are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from etacnn.errors import (
    CheckInvalidError,
    ConfigurationError,
    EmptyLossError,
    NumericError,
)
from etacnn.maskgen import MaskSpec

DTYPE = np.float64


@dataclass
class ConvLayerParams:
    weight: np.ndarray  # (out, in, F, F)
    bias: np.ndarray  # (out,)
    mask: MaskSpec | None = None  # None means an unmasked (1x1 head) filter

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigurationError(f"weight must be (out, in, F, F), got {self.weight.shape}")
        size = self.weight.shape[2]
        if size % 2 == 0:
            raise ConfigurationError(f"filter size must be odd, got {size}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
            )
        if self.mask is not None and self.mask.size != size:
            raise ConfigurationError(f"mask size {self.mask.size} != filter size {size}")

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.size - 1) // 2

    def taps(self) -> list[tuple[int, int]]:
        if self.mask is None:
            return [(i, j) for i in range(self.size) for j in range(self.size)]
        return self.mask.taps()

    def effective_weight(self) -> np.ndarray:
        if self.mask is None:
            return self.weight
        return self.weight * self.mask.cells


def _as4d(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim != 4:
        raise ConfigurationError(f"feature map must be 3-D or 4-D, got shape {x.shape}")
    return x, False


def _gather(x, taps, pad):
    """Stack shifted copies of ``x`` for each tap: (in, taps, batch, rows, cols)."""
    c, b, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, len(taps), b, h, w), dtype=DTYPE)
    for t, (i, j) in enumerate(taps):
        cols[:, t] = xp[:, :, i : i + h, j : j + w]
    return cols


def _tap_matrix(params: ConvLayerParams, taps):
    w = params.effective_weight()
    rows = np.array([i for i, _ in taps], dtype=int)
    cols = np.array([j for _, j in taps], dtype=int)
    return w[:, :, rows, cols]  # (out, in, taps)


def _check_padding(params, padding):
    if padding is None:
        return params.padding
    if padding != params.padding:
        raise ConfigurationError(
            f"padding must be (F-1)/2 = {params.padding} to preserve resolution, got {padding}"
        )
    return padding


def masked_conv_forward(x, params: ConvLayerParams, padding: int | None = None) -> np.ndarray:
    """Stride-1 masked convolution with zero padding; output keeps rows x cols."""
    x4, squeeze = _as4d(x)
    if x4.shape[0] != params.weight.shape[1]:
        raise ConfigurationError(
            f"input has {x4.shape[0]} channels, layer expects {params.weight.shape[1]}"
        )
    if not np.isfinite(x4).all():
        raise NumericError("non-finite value in convolution input")
    pad = _check_padding(params, padding)
    taps = params.taps()
    c, b, h, w = x4.shape
    out_ch = params.weight.shape[0]
    if not taps:
        out = np.broadcast_to(params.bias[:, None, None, None], (out_ch, b, h, w)).copy()
    else:
        cols = _gather(x4, taps, pad).reshape(c * len(taps), b * h * w)
        wm = _tap_matrix(params, taps).reshape(out_ch, c * len(taps))
        out = (wm @ cols).reshape(out_ch, b, h, w)
        out += params.bias[:, None, None, None]
    return out[:, 0] if squeeze else out


def masked_conv_backward(x, params: ConvLayerParams, upstream, padding: int | None = None):
    """Gradients of a masked convolution.

    Returns:
        ``(input_grad, weight_grad, bias_grad)``; ``weight_grad`` has the full
        ``(out, in, F, F)`` shape and is zero at every masked position.
    """
    x4, squeeze = _as4d(x)
    g4, _ = _as4d(upstream)
    out_ch = params.weight.shape[0]
    expected = (out_ch,) + x4.shape[1:]
    if g4.shape != expected:
        raise ConfigurationError(f"upstream gradient shape {g4.shape} != output shape {expected}")
    pad = _check_padding(params, padding)
    taps = params.taps()
    c, b, h, w = x4.shape
    bias_grad = g4.sum(axis=(1, 2, 3))
    weight_grad = np.zeros_like(params.weight, dtype=DTYPE)
    dx = np.zeros_like(x4)
    if not taps:
        return (dx[:, 0] if squeeze else dx), weight_grad, bias_grad

    g2 = g4.reshape(out_ch, b * h * w)
    cols = _gather(x4, taps, pad).reshape(c * len(taps), b * h * w)
    tap_grad = (g2 @ cols.T).reshape(out_ch, c, len(taps))
    rows = np.array([i for i, _ in taps], dtype=int)
    cidx = np.array([j for _, j in taps], dtype=int)
    weight_grad[:, :, rows, cidx] = tap_grad
    if params.mask is not None:
        weight_grad *= params.mask.cells

    wm = _tap_matrix(params, taps).reshape(out_ch, c * len(taps))
    dcols = (wm.T @ g2).reshape(c, len(taps), b, h, w)
    dxp = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for t, (i, j) in enumerate(taps):
        dxp[:, :, i : i + h, j : j + w] += dcols[:, t]
    dx = dxp[:, :, pad : pad + h, pad : pad + w]
    return (dx[:, 0] if squeeze else dx), weight_grad, bias_grad


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return np.where(np.asarray(x) > 0, upstream, 0.0)


def log_softmax(logits, axis=0):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis=0):
    return np.exp(log_softmax(logits, axis=axis))


def softmax_cross_entropy(logits, targets, validity=None):
    """Mean cross-entropy over valid cells, softmax taken along axis 0.

    Args:
        logits: ``(C, ...)`` scores.
        targets: integer classes with shape ``logits.shape[1:]``.
        validity: boolean mask of cells included in the loss; all cells when None.

    Returns:
        ``(loss, logit_grad)``. Invalid cells get zero gradient.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets)
    n_classes = logits.shape[0]
    if targets.shape != logits.shape[1:]:
        raise ConfigurationError(f"targets shape {targets.shape} != logits cells {logits.shape[1:]}")
    if validity is None:
        validity = np.ones(targets.shape, dtype=bool)
    validity = np.asarray(validity, dtype=bool)
    count = int(validity.sum())
    if count == 0:
        raise EmptyLossError("no valid cell in loss")
    safe_targets = np.where(validity, targets, 0).astype(np.intp)
    if (safe_targets < 0).any() or (safe_targets >= n_classes).any():
        raise ConfigurationError(f"target class outside [0, {n_classes})")

    logp = log_softmax(logits, axis=0)
    picked = np.take_along_axis(logp, safe_targets[None], axis=0)[0]
    loss = float(-picked[validity].sum() / count)

    grad = np.exp(logp)
    np.put_along_axis(grad, safe_targets[None], np.take_along_axis(grad, safe_targets[None], 0) - 1.0, 0)
    grad *= validity[None] / count
    return loss, grad


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    decay: float = 0.9
    epsilon: float = 1e-8
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1), got {self.decay}")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigurationError("learning rate and epsilon must be positive")


def rmsprop_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One in-place RMSprop update of every array in ``params``.

    ``v <- decay * v + (1 - decay) * g**2`` then ``p <- p - lr * g / (sqrt(v) + eps)``.
    """
    for name in params:
        if name not in grads:
            raise ConfigurationError(f"no gradient for parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise ConfigurationError(
                f"gradient shape {grads[name].shape} != parameter shape {params[name].shape} for {name!r}"
            )
        if not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads[name]
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ConfigurationError(f"optimizer state shape mismatch for {name!r}")
        v = state.decay * v + (1.0 - state.decay) * g * g
        state.v[name] = v
        p -= state.learning_rate * g / (np.sqrt(v) + state.epsilon)
    return params, state


def grad_check(
    loss_and_grad: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    n_samples: int | None = 500,
    seed: int = 0,
) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return the scalar loss and a gradient
    mapping keyed like ``params``. Entries are perturbed in place and restored.
    Samples are spread over all tensors so that each one is probed.

    Raises:
        CheckInvalidError: if ``step`` is not positive or the loss is not
            reproducible between two calls.
    """
    if not step > 0:
        raise CheckInvalidError(f"finite-difference step must be positive, got {step}")
    base_loss, analytic = loss_and_grad(params)
    analytic = {k: np.array(v, dtype=DTYPE) for k, v in analytic.items()}
    again, _ = loss_and_grad(params)
    if again != base_loss:
        raise CheckInvalidError("loss is not deterministic between calls")

    rng = np.random.default_rng(seed)
    total = sum(p.size for p in params.values())
    budget = total if n_samples is None else min(n_samples, total)
    worst = 0.0
    for name, p in params.items():
        k = p.size if n_samples is None else min(p.size, max(1, int(np.ceil(budget * p.size / total))))
        picks = rng.choice(p.size, size=k, replace=False)
        flat = p.reshape(-1)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            plus, _ = loss_and_grad(params)
            flat[idx] = orig - step
            minus, _ = loss_and_grad(params)
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[name].reshape(-1)[idx]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
