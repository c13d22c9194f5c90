"""The mask-CNN: one mask-A layer, a stack of mask-B layers, a 1x1 class head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from etacnn import nncore
from etacnn.errors import ConfigurationError
from etacnn.maskgen import MaskSpec, build_mask


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``first_filter``/``inner_filter`` are the F and L filter sizes,
    ``first_filters``/``inner_filters`` the channel counts N and n, and
    ``inner_depth`` the number of mask-B layers. Paddings are derived.
    """

    first_filter: int = 5
    inner_filter: int = 5
    first_filters: int = 64
    inner_filters: int = 64
    inner_depth: int = 6
    classes: int = 512
    mask_variant: int = 2
    window: int = 10
    segments: int = 20

    def __post_init__(self):
        for name in ("first_filter", "inner_filter"):
            size = getattr(self, name)
            if size < 3 or size % 2 == 0:
                raise ConfigurationError(f"{name} must be odd and >= 3, got {size}")
        for name in ("first_filters", "inner_filters", "classes", "window", "segments"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.inner_depth < 1:
            raise ConfigurationError("inner_depth must be >= 1")
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.mask_variant not in (1, 2, 3):
            raise ConfigurationError(f"mask_variant must be 1, 2 or 3, got {self.mask_variant}")

    @property
    def padding(self) -> int:
        return (self.first_filter - 1) // 2

    @property
    def inner_padding(self) -> int:
        return (self.inner_filter - 1) // 2

    @property
    def n_conv_layers(self) -> int:
        return 1 + self.inner_depth

    def to_dict(self) -> dict:
        return asdict(self)


class MaskedCNN:
    """Parameters plus forward/backward for the full layer stack.

    Inputs are class-index matrices ``(batch, H, K)`` or ``(H, K)``; logits come
    back as ``(C, batch, H, K)`` (or ``(C, H, K)``).
    """

    def __init__(self, config: ModelConfig, layers: list[nncore.ConvLayerParams]):
        self.config = config
        self.layers = layers

    # parameter access -------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.weight"] = layer.weight
            params[f"layer{i}.bias"] = layer.bias
        return params

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "MaskedCNN":
        layers = [
            nncore.ConvLayerParams(l.weight.copy(), l.bias.copy(), l.mask) for l in self.layers
        ]
        return MaskedCNN(self.config, layers)

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.weight[...] = params[f"layer{i}.weight"]
            layer.bias[...] = params[f"layer{i}.bias"]

    # computation ------------------------------------------------------

    def scale_input(self, classes) -> np.ndarray:
        classes = np.asarray(classes, dtype=np.float64)
        return 2.0 * classes / (self.config.classes - 1) - 1.0

    def forward(self, classes, keep_cache=False):
        classes = np.asarray(classes)
        squeeze = classes.ndim == 2
        if squeeze:
            classes = classes[None]
        if classes.ndim != 3 or classes.shape[2] != self.config.segments:
            raise ConfigurationError(
                f"input must be (batch, H, {self.config.segments}), got {classes.shape}"
            )
        x = self.scale_input(classes)[None]
        cache = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = nncore.masked_conv_forward(x, layer)
            if keep_cache:
                cache.append((x, z))
            x = z if i == last else nncore.relu(z)
        logits = x
        if squeeze:
            logits = logits[:, 0]
        return (logits, cache) if keep_cache else logits

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        if dlogits.ndim == 3:
            dlogits = dlogits[:, None]
        grads = {}
        g = dlogits
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            x, z = cache[i]
            if i != last:
                g = nncore.relu_backward(z, g)
            g, dw, db = nncore.masked_conv_backward(x, self.layers[i], g)
            grads[f"layer{i}.weight"] = dw
            grads[f"layer{i}.bias"] = db
        return grads

    def loss_and_grad(self, classes, targets, validity):
        logits, cache = self.forward(classes, keep_cache=True)
        loss, dlogits = nncore.softmax_cross_entropy(logits, targets, validity)
        return loss, self.backward(cache, dlogits)

    def probabilities(self, classes) -> np.ndarray:
        return nncore.softmax(self.forward(classes), axis=0)


def _he_layer(rng, out_ch, in_ch, size, mask: MaskSpec | None):
    fan_in = in_ch * size * size
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, size, size))
    if mask is not None:
        weight = weight * mask.cells
    return nncore.ConvLayerParams(weight, np.zeros(out_ch), mask)


def build_model(config: ModelConfig, seed: int = 0, masks: tuple[MaskSpec, MaskSpec] | None = None) -> MaskedCNN:
    """Initialize a mask-CNN with He-normal weights and zero biases.

    The weight scale is ``sqrt(2 / fan_in)`` with ``fan_in = in_ch * F * F``.
    ``masks`` optionally overrides the generated (kind A, kind B) masks, e.g.
    with patterns loaded from mask files.
    """
    if masks is None:
        mask_a = build_mask("A", config.mask_variant, config.first_filter)
        mask_b = build_mask("B", config.mask_variant, config.inner_filter)
    else:
        mask_a, mask_b = masks
        if mask_a.kind != "A" or mask_b.kind != "B":
            raise ConfigurationError("first mask must be kind A, second kind B")
        if mask_a.size != config.first_filter or mask_b.size != config.inner_filter:
            raise ConfigurationError("mask sizes do not match the configured filter sizes")
    rng = np.random.default_rng(seed)
    layers = [_he_layer(rng, config.first_filters, 1, config.first_filter, mask_a)]
    in_ch = config.first_filters
    for _ in range(config.inner_depth):
        layers.append(_he_layer(rng, config.inner_filters, in_ch, config.inner_filter, mask_b))
        in_ch = config.inner_filters
    layers.append(_he_layer(rng, config.classes, in_ch, 1, None))
    return MaskedCNN(config, layers)
