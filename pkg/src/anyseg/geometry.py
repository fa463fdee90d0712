"""Binary masks, boxes, visual-prompt rasterization and IoU primitives.

Masks are plain ``numpy`` boolean arrays of shape ``(H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PROMPT_KINDS = ("point", "scribble", "box", "mask")

_SQUARE_3x3 = np.ones((3, 3), dtype=bool)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive-exclusive pixel coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate box {self}")

    def to_mask(self, height: int, width: int) -> np.ndarray:
        if self.x0 < 0 or self.y0 < 0 or self.x1 > width or self.y1 > height:
            raise GeometryError(f"box {self} outside {height}x{width} image")
        m = np.zeros((height, width), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


@dataclass
class VisualPrompt:
    kind: str
    rendering: np.ndarray
    source_instance: int = -1


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise GeometryError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool, copy=False)


def iou(a, b) -> float:
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def bbox_of(m) -> Box:
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise GeometryError("bbox_of: empty mask")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def dilate(m, pixels: int = 1) -> np.ndarray:
    """Square (8-connected) dilation by ``pixels``."""
    m = as_mask(m)
    if pixels <= 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=_SQUARE_3x3, iterations=pixels)


def _point(m: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.nonzero(m)
    i = rng.integers(ys.size)
    y, x = int(ys[i]), int(xs[i])
    out = np.zeros_like(m)
    out[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = True
    return out


_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _scribble(m: np.ndarray, rng: np.random.Generator, steps: int) -> np.ndarray:
    # self-avoiding 4-connected walk; stops early when boxed in
    ys, xs = np.nonzero(m)
    i = rng.integers(ys.size)
    y, x = int(ys[i]), int(xs[i])
    out = np.zeros_like(m)
    out[y, x] = True
    h, w = m.shape
    for _ in range(steps):
        options = [
            (y + dy, x + dx)
            for dy, dx in _STEPS
            if 0 <= y + dy < h and 0 <= x + dx < w and m[y + dy, x + dx] and not out[y + dy, x + dx]
        ]
        if not options:
            break
        y, x = options[rng.integers(len(options))]
        out[y, x] = True
    return out


def rasterize_prompt(kind: str, instance_mask, rng: np.random.Generator,
                     source_instance: int = -1, scribble_steps: int = 20) -> VisualPrompt:
    m = as_mask(instance_mask)
    if not m.any():
        raise GeometryError("cannot rasterize a prompt from an empty mask")
    if kind == "point":
        r = _point(m, rng)
    elif kind == "scribble":
        r = _scribble(m, rng, scribble_steps)
    elif kind == "box":
        r = bbox_of(m).to_mask(*m.shape)
    elif kind == "mask":
        r = m.copy()
    else:
        raise GeometryError(f"unknown prompt kind {kind!r}; expected one of {PROMPT_KINDS}")
    return VisualPrompt(kind, r, source_instance)


def rle_encode(m) -> dict:
    """Row-major run lengths, alternating runs of False/True starting with False."""
    m = as_mask(m)
    flat = m.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise GeometryError(f"RLE counts sum {sum(counts)} != {h}*{w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)
