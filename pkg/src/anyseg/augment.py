"""Geometric augmentation for segmentor training: random rescale with crop/pad, plus dihedral flips."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries applied to the first two axes (k in 0..7)."""
    out = np.rot90(arr, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def random_scale(image: np.ndarray, regions, scale: float, rng: np.random.Generator, min_area: int = 1):
    """Resize by ``scale`` then crop (scale > 1) or pad (scale < 1) back to the original size.

    Padding uses the mean border color so no unlabeled structure appears. Instances that
    lose all pixels are dropped.
    """
    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    img = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    img = F.interpolate(img, size=(nh, nw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    masks = [np.asarray(m, dtype=bool) for _, m in regions]
    if masks:
        mt = torch.from_numpy(np.stack(masks).astype(np.float32))[None]
        mt = F.interpolate(mt, size=(nh, nw), mode="nearest")[0].numpy() > 0.5
    else:
        mt = np.zeros((0, nh, nw), dtype=bool)
    if scale >= 1.0:
        y0 = int(rng.integers(nh - h + 1))
        x0 = int(rng.integers(nw - w + 1))
        img = img[y0:y0 + h, x0:x0 + w]
        mt = mt[:, y0:y0 + h, x0:x0 + w]
    else:
        border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
        canvas = np.broadcast_to(border.mean(0), (h, w, image.shape[2])).copy()
        full = np.zeros((mt.shape[0], h, w), dtype=bool)
        y0 = int(rng.integers(h - nh + 1))
        x0 = int(rng.integers(w - nw + 1))
        canvas[y0:y0 + nh, x0:x0 + nw] = img
        full[:, y0:y0 + nh, x0:x0 + nw] = mt
        img, mt = canvas, full
    kept = [(int(c), mt[i]) for i, (c, _) in enumerate(regions) if mt[i].sum() >= min_area]
    return img.astype(np.float32), kept


def augment_scene(image, regions, rng: np.random.Generator, scale_min: float, scale_max: float,
                  flips: bool = True):
    s = float(rng.uniform(scale_min, scale_max))
    image, regions = random_scale(image, regions, s, rng)
    if flips:
        k = int(rng.integers(8))
        image = dihedral(image, k)
        regions = [(c, dihedral(m, k)) for c, m in regions]
    return image, regions
