"""Dual encoders, pixel-shuffle rescaling, dual projectors, segmentation connector and region sampling.

Feature maps are channel-first tensors ``(B, C, h, w)``; a map's scale is implied by
``h / image_size``.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .layers import MLP, Block


class ShapeError(ValueError):
    pass


def pixel_shuffle(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Lossless space/channel rearrangement.

    ``scale=0.5`` folds each 2x2 block into channels, (C, h, w) -> (4C, h/2, w/2);
    ``scale=2.0`` is its exact inverse, (C, h, w) -> (C/4, 2h, 2w).
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    c, h, w = x.shape[1:]
    if scale == 0.5:
        if h % 2 or w % 2:
            raise ShapeError(f"patch-merge needs even spatial size, got {h}x{w}")
        y = F.pixel_unshuffle(x, 2)
    elif scale == 2.0:
        if c % 4:
            raise ShapeError(f"patch-expand needs channels divisible by 4, got {c}")
        y = F.pixel_shuffle(x, 2)
    else:
        raise ShapeError(f"pixel_shuffle scale must be 0.5 or 2.0, got {scale}")
    return y[0] if squeeze else y


def _check_image(x: torch.Tensor, cfg: ModelConfig, stride: int):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected images (B, 3, H, W), got {tuple(x.shape)}")
    h, w = x.shape[2:]
    if h % stride or w % stride:
        raise ShapeError(f"image {h}x{w} not divisible by stride {stride}")


class ImageEncoder(nn.Module):
    """Global image encoder: patch embedding plus a small transformer stack."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.image_width
        g = cfg.image_size // cfg.patch
        self.patch_embed = nn.Conv2d(3, c, cfg.patch, stride=cfg.patch, bias=cfg.bias)
        self.pos = nn.Parameter(torch.randn(1, g * g, c) * 0.02)
        self.blocks = nn.ModuleList(Block(c, cfg.image_heads, bias=cfg.bias) for _ in range(cfg.image_blocks))
        self.norm = nn.LayerNorm(c)

    def embed(self, x):
        _check_image(x, self.cfg, self.cfg.patch)
        return self.patch_embed(x)

    def forward(self, x):
        e = self.embed(x)
        b, c, h, w = e.shape
        t = e.flatten(2).transpose(1, 2)
        if t.shape[1] == self.pos.shape[1]:
            t = t + self.pos
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t).transpose(1, 2).reshape(b, c, h, w)


class SegEncoder(nn.Module):
    """Fine-grained segmentation encoder: strided conv stem to 1/16, then transformer blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.seg_width
        widths = [3] + [max(8, c * k // 4) for k in (1, 2, 3)] + [c] if cfg.seg_stem_depth > 1 else [3, c // 8, c // 4, c // 2, c]
        layers = []
        for i in range(4):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1, bias=cfg.bias))
            for _ in range(cfg.seg_stem_depth - 1):
                layers += [nn.GroupNorm(math.gcd(8, widths[i + 1]), widths[i + 1]), nn.GELU(),
                           nn.Conv2d(widths[i + 1], widths[i + 1], 3, padding=1, bias=cfg.bias)]
            if i < 3:
                layers.append(nn.GroupNorm(math.gcd(8, widths[i + 1]), widths[i + 1]))
                layers.append(nn.GELU())
        self.stem = nn.Sequential(*layers)
        g = cfg.image_size // 16
        self.pos = nn.Parameter(torch.randn(1, g * g, c) * 0.02)
        self.blocks = nn.ModuleList(Block(c, cfg.seg_heads, bias=cfg.bias) for _ in range(cfg.seg_blocks))
        self.norm = nn.LayerNorm(c) if cfg.seg_blocks else nn.Identity()

    def forward(self, x):
        _check_image(x, self.cfg, 16)
        e = self.stem(x)
        if not self.cfg.seg_blocks:
            return e
        b, c, h, w = e.shape
        t = e.flatten(2).transpose(1, 2)
        if t.shape[1] == self.pos.shape[1]:
            t = t + self.pos
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t).transpose(1, 2).reshape(b, c, h, w)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 refine, 1x1 expand (linear)."""

    def __init__(self, c_in: int, inner: int, c_out: int):
        super().__init__()
        self.reduce = nn.Conv2d(c_in, inner, 1)
        self.refine = nn.Conv2d(inner, inner, 3, padding=1)
        self.expand = nn.Conv2d(inner, c_out, 1)

    def forward(self, x):
        return self.expand(self.refine(self.reduce(x)))

    @torch.no_grad()
    def init_identity(self):
        self.refine.weight.zero_()
        n = self.refine.weight.shape[0]
        self.refine.weight[torch.arange(n), torch.arange(n), 1, 1] = 1.0
        for conv in (self.reduce, self.refine, self.expand):
            conv.bias.zero_()


class PerceptronBranch(nn.Module):
    def __init__(self, c_in: int, inner: int, c_out: int):
        super().__init__()
        self.fc1 = nn.Conv2d(c_in, inner, 1)
        self.fc2 = nn.Conv2d(inner, c_out, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


SCALES = ("1/32", "1/16", "1/8")


class SegConnector(nn.Module):
    """Turns the single-scale 1/16 map into decoder-width maps at 1/8, 1/16 and 1/32.

    ``kind='none'`` passes the 1/16 map through (with a 1x1 projection when widths
    differ); ``multiscale=False`` keeps only the 1/16 branch.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.connector_kind
        self.multiscale = cfg.connector_multiscale and self.kind != "none"
        c, d = cfg.seg_width, cfg.dec_width
        inner = d // 2
        if self.kind == "none":
            self.branches = nn.ModuleDict(
                {"1/16": nn.Identity() if c == d else nn.Conv2d(c, d, 1)}
            )
            return
        make = Bottleneck if self.kind == "conv" else PerceptronBranch
        self.branches = nn.ModuleDict({"1/16": make(c, inner, d)})
        if self.multiscale:
            self.branches["1/8"] = make(c, inner, 4 * d)
            self.branches["1/32"] = make(c, inner, d // 4)

    @property
    def scales(self) -> tuple[str, ...]:
        return tuple(s for s in SCALES if s in self.branches)

    def forward(self, z_s: torch.Tensor) -> dict[str, torch.Tensor]:
        h, w = z_s.shape[-2:]
        if self.multiscale and (h % 2 or w % 2):
            raise ShapeError(f"connector needs an even 1/16 grid, got {h}x{w}")
        out = {"1/16": self.branches["1/16"](z_s)}
        if self.multiscale:
            out["1/8"] = pixel_shuffle(self.branches["1/8"](z_s), 2.0)
            out["1/32"] = pixel_shuffle(self.branches["1/32"](z_s), 0.5)
        return {s: out[s] for s in SCALES if s in out}


class ImageProjector(nn.Module):
    """Patch-grid features -> language-space tokens, row-major."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = MLP(cfg.image_width, cfg.lm_width, cfg.lm_width, bias=cfg.bias)

    def forward(self, z_v):
        return self.mlp(z_v.flatten(2).transpose(1, 2))


class SegProjector(nn.Module):
    """Patch-merge the 1/16 map once, then project each merged cell to a language-space token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = MLP(4 * cfg.seg_width, cfg.lm_width, cfg.lm_width, bias=cfg.bias)

    def forward(self, z_s):
        return self.mlp(pixel_shuffle(z_s, 0.5).flatten(2).transpose(1, 2))


class RegionProjector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = MLP(cfg.seg_width, cfg.lm_width, cfg.lm_width, bias=cfg.bias)

    def forward(self, pooled):
        return self.mlp(pooled)


def region_cells(rendering: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Flat indices of grid cells touched by any true pixel of ``rendering``.

    A rendering too small to touch any cell falls back to the cell nearest its centroid.
    """
    rendering = np.asarray(rendering, dtype=bool)
    gh, gw = grid
    h, w = rendering.shape
    if h % gh or w % gw:
        raise ShapeError(f"rendering {h}x{w} does not tile a {gh}x{gw} grid")
    cells = rendering.reshape(gh, h // gh, gw, w // gw).any(axis=(1, 3))
    active = np.flatnonzero(cells)
    if active.size == 0:
        ys, xs = np.nonzero(rendering)
        if ys.size == 0:
            cy, cx = h / 2, w / 2
        else:
            cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
        r = min(int(cy // (h // gh)), gh - 1)
        c = min(int(cx // (w // gw)), gw - 1)
        active = np.array([r * gw + c])
    return active


def sample_region_points(rendering, grid, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """K cell indices drawn from the active cells (with replacement only when fewer than K)."""
    active = region_cells(rendering, grid)
    if rng is None:
        return active
    return rng.choice(active, size=k, replace=active.size < k)


def pool_region(z_s: torch.Tensor, points: np.ndarray) -> torch.Tensor:
    """Mean of the (C, h, w) map at the given flat cell indices."""
    flat = z_s.flatten(1)
    return flat[:, torch.as_tensor(points, dtype=torch.long)].mean(1)


def sample_region_feature(z_s: torch.Tensor, rendering, projector: RegionProjector,
                          rng: np.random.Generator | None = None, k: int = 16) -> torch.Tensor:
    """Region feature for one ``<region>`` placeholder: point-sample, mean-pool, project."""
    points = sample_region_points(rendering, tuple(z_s.shape[-2:]), k, rng)
    return projector(pool_region(z_s, points))
