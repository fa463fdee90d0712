"""Matplotlib renderings: mask overlays and training loss curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COLORS = plt.get_cmap("tab10").colors


def overlay(image: np.ndarray, masks: Sequence[np.ndarray], alpha: float = 0.5) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32).copy()
    for k, m in enumerate(masks):
        m = np.asarray(m, bool)
        c = np.asarray(_COLORS[k % len(_COLORS)], dtype=np.float32)
        out[m] = (1 - alpha) * out[m] + alpha * c
    return np.clip(out, 0, 1)


def save_overlay(path, image, pred_masks, gt_masks=None, title: str = "", labels: Sequence[str] = ()):
    """Side-by-side image / prediction (/ ground truth) panels."""
    panels = [("image", np.asarray(image)), ("prediction", overlay(image, pred_masks))]
    if gt_masks is not None:
        panels.append(("ground truth", overlay(image, gt_masks)))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.9))
    for ax, (name, im) in zip(axes, panels):
        ax.imshow(im, interpolation="nearest")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    if labels:
        axes[1].text(0, -0.08, ", ".join(labels), transform=axes[1].transAxes, fontsize=6, va="top")
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_loss_curves(path, curves: dict[str, Sequence[dict]], smooth: int = 20):
    """One panel per stage; ``curves[name]`` is a list of per-step records with a ``loss`` key."""
    names = [k for k, v in curves.items() if v]
    if not names:
        return
    fig, axes = plt.subplots(1, len(names), figsize=(3.4 * len(names), 2.8), squeeze=False)
    for ax, name in zip(axes[0], names):
        rec = curves[name]
        steps = np.array([r["step"] for r in rec])
        for key in ("loss", "seg", "ar"):
            vals = np.array([r.get(key, np.nan) for r in rec], dtype=float)
            if np.all(np.isnan(vals)) or (key != "loss" and np.allclose(vals, np.array([r["loss"] for r in rec]))):
                continue
            w = min(smooth, len(vals))
            sm = np.convolve(np.nan_to_num(vals), np.ones(w) / w, mode="valid")
            ax.plot(steps[w - 1:], sm, label=key, lw=1)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
