"""Metric engines (PQ, mIoU, AP/AP50, cIoU/gIoU) and the interactive / VGD evaluation procedures.

Per-image inputs are plain lists:

* segments: ``(category, mask)``
* detections: ``(category, mask, confidence)``
* label maps: integer arrays, ``-1`` for unlabeled pixels
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import PROMPT_KINDS, iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


class MetricError(ValueError):
    pass


def _pairwise_iou(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    fa = np.stack([np.asarray(m, bool).ravel() for m in a]).astype(np.float64)
    fb = np.stack([np.asarray(m, bool).ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


# ---------------------------------------------------------------------------
# panoptic quality


@dataclass
class PQResult:
    pq: float
    pq_things: float | None
    pq_stuff: float | None
    per_category: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.pq, self.pq_things, self.pq_stuff))


def panoptic_quality(preds, gts, stuff: Sequence[int] = ()) -> PQResult:
    """PQ = sum of matched IoUs / (TP + FP/2 + FN/2) per category, averaged over categories.

    A prediction matches a same-category ground truth when IoU > 0.5, which makes the
    match unique; predicted segments of one image must not overlap.
    """
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    acc = defaultdict(lambda: [0.0, 0, 0, 0])  # iou_sum, tp, fp, fn
    for p_img, g_img in zip(preds, gts):
        if p_img:
            stack = np.stack([np.asarray(m, bool) for _, m in p_img]).sum(0)
            if (stack > 1).any():
                raise MetricError("overlapping predicted segments; run panoptic_merge first")
        ious = _pairwise_iou([m for _, m in p_img], [m for _, m in g_img])
        matched_p, matched_g = set(), set()
        for pi, (pc, _) in enumerate(p_img):
            for gi, (gc, _) in enumerate(g_img):
                if pc != gc or ious[pi, gi] <= 0.5:
                    continue
                if gi in matched_g or pi in matched_p:
                    raise MetricError("IoU > 0.5 matched a segment twice")
                matched_p.add(pi)
                matched_g.add(gi)
                acc[pc][0] += ious[pi, gi]
                acc[pc][1] += 1
        for pi, (pc, _) in enumerate(p_img):
            if pi not in matched_p:
                acc[pc][2] += 1
        for gi, (gc, _) in enumerate(g_img):
            if gi not in matched_g:
                acc[gc][3] += 1
    per_cat = {}
    for c, (s, tp, fp, fn) in acc.items():
        denom = tp + 0.5 * fp + 0.5 * fn
        per_cat[c] = s / denom if denom > 0 else 0.0
    stuff = set(stuff)

    def _mean(cats):
        cats = list(cats)
        return float(np.mean([per_cat[c] for c in cats])) if cats else None

    pq = _mean(per_cat)
    return PQResult(pq if pq is not None else 0.0, _mean(c for c in per_cat if c not in stuff),
                    _mean(c for c in per_cat if c in stuff), per_cat)


# ---------------------------------------------------------------------------
# mIoU


def mean_iou(pred_maps, gt_maps, categories: Sequence[int] | None = None) -> float:
    """Dataset-level per-category IoU, averaged over categories present in the ground truth."""
    if len(pred_maps) != len(gt_maps):
        raise MetricError("prediction / ground-truth image counts differ")
    inter, union, present = defaultdict(int), defaultdict(int), set()
    for p, g in zip(pred_maps, gt_maps):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise MetricError(f"label map shapes differ: {p.shape} vs {g.shape}")
        cats = set(np.unique(g[g >= 0]).tolist())
        present |= cats
        for c in cats | set(np.unique(p[p >= 0]).tolist()):
            pc, gc = p == c, g == c
            inter[c] += int((pc & gc).sum())
            union[c] += int((pc | gc).sum())
    if categories is not None:
        present &= set(categories)
    if not present:
        raise MetricError("no ground-truth categories to average over")
    return float(np.mean([inter[c] / union[c] for c in sorted(present)]))


def semantic_map(segments, shape, background: int = -1) -> np.ndarray:
    """Category-union label map from non-overlapping ``(category, mask)`` segments."""
    out = np.full(shape, background, dtype=np.int64)
    for c, m in segments:
        out[np.asarray(m, bool)] = c
    return out


# ---------------------------------------------------------------------------
# average precision


def _interp_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        raise MetricError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope
    env = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0, 1, 101)
    idx = np.searchsorted(recall, points, side="left")
    return float(np.mean([env[i] if i < env.size else 0.0 for i in idx]))


def _match_category(dets, gts_by_img, thr):
    """dets: list of (conf, img, det_idx, mask) pre-sorted; returns tp flags."""
    used = {img: np.zeros(len(g), bool) for img, g in gts_by_img.items()}
    tp = np.zeros(len(dets))
    for k, (_, img, _, mask) in enumerate(dets):
        g = gts_by_img.get(img, [])
        if not g:
            continue
        ious = _pairwise_iou([mask], g)[0]
        ious[used[img]] = -1
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            used[img][j] = True
            tp[k] = 1
    return tp


def average_precision(preds, gts, thresholds: Sequence[float] = COCO_THRESHOLDS) -> dict:
    """COCO-style 101-point interpolated AP, averaged over categories with ground truth and over
    IoU thresholds. Detections are matched greedily by descending confidence, ties broken by
    (image, detection index)."""
    if len(preds) != len(gts):
        raise MetricError("prediction / ground-truth image counts differ")
    gt_cat = defaultdict(lambda: defaultdict(list))
    for img, g_img in enumerate(gts):
        for c, m in g_img:
            gt_cat[c][img].append(np.asarray(m, bool))
    if not gt_cat:
        raise MetricError("AP undefined without ground truth")
    det_cat = defaultdict(list)
    for img, p_img in enumerate(preds):
        for k, (c, m, conf) in enumerate(p_img):
            det_cat[c].append((float(conf), img, k, np.asarray(m, bool)))
    per_thr = {}
    for thr in thresholds:
        aps = []
        for c in sorted(gt_cat):
            dets = sorted(det_cat.get(c, []), key=lambda d: (-d[0], d[1], d[2]))
            n_gt = sum(len(v) for v in gt_cat[c].values())
            aps.append(_interp_ap(_match_category(dets, gt_cat[c], thr), n_gt))
        per_thr[float(thr)] = float(np.mean(aps))
    out = {"AP": float(np.mean(list(per_thr.values()))), "per_threshold": per_thr}
    out["AP50"] = per_thr[0.5] if 0.5 in per_thr else average_precision(preds, gts, (0.5,))["AP"]
    return out


# ---------------------------------------------------------------------------
# cIoU / gIoU


def ciou_giou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[float, float]:
    if len(preds) != len(gts):
        raise MetricError("prediction / ground-truth counts differ")
    if not preds:
        raise MetricError("cIoU/gIoU undefined on an empty dataset")
    inter = union = 0
    per = []
    for p, g in zip(preds, gts):
        p, g = np.asarray(p, bool), np.asarray(g, bool)
        i, u = int((p & g).sum()), int((p | g).sum())
        inter += i
        union += u
        per.append(i / u if u else 0.0)
    return (inter / union if union else 0.0), float(np.mean(per))


# ---------------------------------------------------------------------------
# task protocols


@dataclass
class InteractiveResult:
    selected: list          # per sample: chosen detection index or None
    ious: list
    miou: float
    ciou: float


def select_interactive(detections, prompt_mask, threshold: float = 0.5):
    """Drop detections below ``threshold`` confidence, then pick the one overlapping the prompt
    rendering best. Returns the detection index or ``None``."""
    best, best_iou = None, -1.0
    for k, (_, m, conf) in enumerate(detections):
        if conf < threshold:
            continue
        v = iou(m, prompt_mask)
        if v > best_iou:
            best, best_iou = k, v
    return best


def eval_interactive(detections, prompt_masks, gt_masks, threshold: float = 0.5) -> InteractiveResult:
    """Samples with no surviving detection score IoU 0 and stay in the averages."""
    if not (len(detections) == len(prompt_masks) == len(gt_masks)):
        raise MetricError("interactive inputs differ in length")
    if not gt_masks:
        raise MetricError("no interactive samples")
    chosen, sel_masks = [], []
    for dets, pm, gm in zip(detections, prompt_masks, gt_masks):
        k = select_interactive(dets, pm, threshold)
        chosen.append(k)
        sel_masks.append(np.zeros_like(np.asarray(gm, bool)) if k is None else np.asarray(dets[k][1], bool))
    ious = [iou(s, g) for s, g in zip(sel_masks, gt_masks)]
    ciou, giou = ciou_giou(sel_masks, gt_masks)
    return InteractiveResult(chosen, ious, giou, ciou)


def eval_vgd(detections, gts, prompt_kinds) -> dict:
    """AP / AP50 overall and per prompt kind.

    ``detections[i]``: (category, mask, conf); ``gts[i]``: (category, mask) restricted to the
    prompted categories; ``prompt_kinds[i]``: ``{category: kind}`` for that sample.
    """
    out = {}
    res = average_precision(detections, gts)
    out["AP"], out["AP50"] = res["AP"], res["AP50"]
    for kind in PROMPT_KINDS:
        sub_p, sub_g = [], []
        for dets, g, kinds in zip(detections, gts, prompt_kinds):
            cats = {c for c, k in kinds.items() if k == kind}
            sub_p.append([d for d in dets if d[0] in cats])
            sub_g.append([x for x in g if x[0] in cats])
        if any(sub_g):
            r = average_precision(sub_p, sub_g)
            out[f"{kind}/AP"], out[f"{kind}/AP50"] = r["AP"], r["AP50"]
    return out


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)     # task -> {name: value}
    counts: dict = field(default_factory=dict)      # task -> sample count
    config_hash: str = ""

    def add(self, task: str, values: dict, count: int):
        self.metrics[task] = {k: (None if v is None else float(v)) for k, v in values.items()}
        self.counts[task] = int(count)

    def check_range(self):
        for task, vals in self.metrics.items():
            for k, v in vals.items():
                if v is not None and not 0.0 <= v <= 1.0:
                    raise MetricError(f"{task}/{k} = {v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "counts": self.counts, "config_hash": self.config_hash},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["metrics"], d["counts"], d.get("config_hash", ""))

    def to_text(self) -> str:
        lines = []
        for task in sorted(self.metrics):
            vals = " ".join(f"{k}={'n/a' if v is None else f'{100 * v:.1f}'}"
                            for k, v in sorted(self.metrics[task].items()))
            lines.append(f"{task}\tn={self.counts.get(task, 0)}\t{vals}")
        return "\n".join(lines) + "\n"
