"""Independent reference implementations used to check the metric engines."""
from __future__ import annotations

import numpy as np

from anyseg import pipeline

THRESHOLDS = [round(0.5 + 0.05 * k, 2) for k in range(10)]


def _iou(a, b):
    u = np.logical_or(a, b).sum()
    return np.logical_and(a, b).sum() / u if u else 0.0


def brute_ap(dets, gts, thresholds=None):
    """Plain-loop COCO AP: greedy matching in (-conf, image, index) order, 101-point
    interpolation of the precision envelope, mean over categories then thresholds."""
    thresholds = THRESHOLDS if thresholds is None else thresholds
    cats = sorted({c for g in gts for c, _ in g})
    per_thr = []
    for thr in thresholds:
        aps = []
        for c in cats:
            order = sorted(
                [(conf, i, k, m) for i, d in enumerate(dets) for k, (cc, m, conf) in enumerate(d) if cc == c],
                key=lambda t: (-t[0], t[1], t[2]),
            )
            n_gt = sum(1 for g in gts for cc, _ in g if cc == c)
            taken = set()
            hits = []
            for conf, i, k, m in order:
                best, best_j = -1.0, None
                for j, (cc, gm) in enumerate(gts[i]):
                    if cc != c or (i, j) in taken:
                        continue
                    v = _iou(m, gm)
                    if v > best:
                        best, best_j = v, j
                if best_j is not None and best >= thr:
                    taken.add((i, best_j))
                    hits.append(1)
                else:
                    hits.append(0)
            prec, rec = [], []
            tp = 0
            for n, h in enumerate(hits, 1):
                tp += h
                prec.append(tp / n)
                rec.append(tp / n_gt)
            total = 0.0
            for r in np.linspace(0, 1, 101):
                cand = [p for p, rr in zip(prec, rec) if rr >= r]
                total += max(cand) if cand else 0.0
            aps.append(total / 101)
        per_thr.append(sum(aps) / len(aps))
    return sum(per_thr) / len(per_thr)


def gt_oracle_metrics(samples: dict) -> dict:
    """Every metric the evaluator reports, computed on ground-truth prediction records."""
    out = {}
    for task, ss in samples.items():
        recs = pipeline.records_from_ground_truth(ss)
        for k, v in pipeline.evaluate_task(task, recs, ss).items():
            if v is not None:
                out[f"{task}/{k}"] = v
    return out
