"""Binary causality masks for masked convolution filters.

A mask is an odd ``F x F`` 0/1 grid laid over a filter. Cells set to 1 may
connect an input position to the output at the filter center. Raster order is
row-major over (trip, segment), so an admissible cell lies in an earlier row,
or in the center row strictly left of the center. Kind ``B`` masks also admit
the center itself; kind ``A`` masks never do.

Variants restrict the admissible region:

* 1: the full raster-causal region.
* 2: only column offsets ``|j - c| <= 1`` (nearby segments).
* 3: only row offsets ``|i - c| <= 1`` (the previous trip and the current one).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from etacnn.errors import ConfigurationError

KINDS = ("A", "B")
VARIANTS = (1, 2, 3)


@dataclass(frozen=True)
class MaskSpec:
    size: int
    kind: str
    variant: int | None
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.float64)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def center(self) -> int:
        return (self.size - 1) // 2

    def taps(self) -> list[tuple[int, int]]:
        """Admitted (row, col) filter offsets in raster order."""
        rows, cols = np.nonzero(self.cells)
        return [(int(i), int(j)) for i, j in zip(rows, cols)]

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (
            self.size == other.size
            and self.kind == other.kind
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.size, self.kind, self.cells.tobytes()))


def causal_region(size: int, include_center: bool) -> np.ndarray:
    c = (size - 1) // 2
    region = np.zeros((size, size), dtype=np.float64)
    region[:c, :] = 1.0
    region[c, :c] = 1.0
    if include_center:
        region[c, c] = 1.0
    return region


def _check_size(size):
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ConfigurationError(f"mask size must be a positive odd integer, got {size!r}")


def build_mask(kind: str, variant: int, size: int) -> MaskSpec:
    """Construct a kind A/B mask of the given variant.

    Args:
        kind: ``"A"`` (center excluded) or ``"B"`` (center included).
        variant: 1, 2 or 3, see the module docstring.
        size: odd filter size, at least 3.

    Raises:
        ConfigurationError: on an even or too small size, unknown kind or variant.
    """
    _check_size(size)
    if size < 3:
        raise ConfigurationError(f"mask size must be >= 3, got {size}")
    if kind not in KINDS:
        raise ConfigurationError(f"mask kind must be 'A' or 'B', got {kind!r}")
    if variant not in VARIANTS:
        raise ConfigurationError(f"mask variant must be 1, 2 or 3, got {variant!r}")

    c = (size - 1) // 2
    cells = causal_region(size, include_center=kind == "B")
    offsets = np.arange(size) - c
    if variant == 2:
        cells[:, np.abs(offsets) > 1] = 0.0
    elif variant == 3:
        cells[np.abs(offsets) > 1, :] = 0.0
    return MaskSpec(size=size, kind=kind, variant=variant, cells=cells)


def validate_mask(mask: MaskSpec) -> list[tuple[int, int]]:
    """Return the coordinates of every non-causal 1-cell (empty when valid).

    Non-binary entries are reported as violations too.
    """
    cells = np.asarray(mask.cells)
    if cells.shape != (mask.size, mask.size):
        raise ConfigurationError(
            f"mask cells have shape {cells.shape}, expected {(mask.size, mask.size)}"
        )
    allowed = causal_region(mask.size, include_center=mask.kind == "B")
    bad = (cells != 0) & ((allowed == 0) | (cells != 1))
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]


def is_valid(mask: MaskSpec) -> bool:
    return not validate_mask(mask) and (mask.kind != "B" or bool(mask.cells.any()))


def format_mask(mask: MaskSpec) -> str:
    lines = [f"MASK {mask.kind} {mask.size}"]
    for row in mask.cells.astype(int):
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_mask(text: str) -> MaskSpec:
    """Parse the ``MASK <kind> <F>`` text format and validate the result."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ConfigurationError("empty mask file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "MASK":
        raise ConfigurationError(f"bad mask header: {lines[0]!r}")
    kind = head[1]
    if kind not in KINDS:
        raise ConfigurationError(f"mask kind must be 'A' or 'B', got {kind!r}")
    try:
        size = int(head[2])
    except ValueError as exc:
        raise ConfigurationError(f"bad mask size: {head[2]!r}") from exc
    _check_size(size)
    body = lines[1:]
    if len(body) != size:
        raise ConfigurationError(f"expected {size} mask rows, found {len(body)}")
    rows = []
    for ln in body:
        tokens = ln.split()
        if len(tokens) != size or any(t not in ("0", "1") for t in tokens):
            raise ConfigurationError(f"bad mask row: {ln!r}")
        rows.append([int(t) for t in tokens])
    mask = MaskSpec(size=size, kind=kind, variant=None, cells=np.array(rows))
    violations = validate_mask(mask)
    if violations:
        raise ConfigurationError(f"mask breaks causality at {violations}")
    if kind == "B" and not mask.cells.any():
        raise ConfigurationError("kind B mask has no admitted cell")
    return mask


def load_mask(path) -> MaskSpec:
    return parse_mask(Path(path).read_text(encoding="utf-8"))


def save_mask(mask: MaskSpec, path) -> None:
    Path(path).write_text(format_mask(mask), encoding="utf-8")
