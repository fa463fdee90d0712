"""Corpus layout, batch inference records and per-task evaluation, plus the end-to-end run."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evaluation as ev
from . import geometry, trainer
from .config import RunConfig
from .datagen import DatasetSpec, SegSample, generate_datasets, save_dataset, with_frequencies
from .maskdecoder import SamplePrediction, panoptic_merge, predict_instances, upsample_masks
from .model import UnifiedSegModel, images_to_tensor
from .prompt_format import CHAT_TASKS, SEG_TASKS

# 1,024 training scenes split over the tasks; 128 held-out scenes for the four headline tasks
TRAIN_SIZES = {
    "generic": 448, "referring": 160, "reasoning": 32, "gcg": 64,
    "interactive": 128, "vgd": 128, "conversation": 32, "caption": 32,
}
EVAL_SIZES = {"generic": 32, "referring": 32, "interactive": 32, "vgd": 32}
EVAL_SEED_OFFSET = 1000


def scaled_sizes(sizes: dict[str, int], scale: float) -> dict[str, int]:
    return {k: max(1, int(round(v * scale))) for k, v in sizes.items()}


def write_split(root, sizes: dict[str, int], seed: int) -> list[DatasetSpec]:
    data = generate_datasets(sizes, seed)
    specs = with_frequencies([DatasetSpec(t, len(s), t) for t, s in data.items()])
    for spec in specs:
        save_dataset(Path(root) / spec.name, data[spec.name], spec)
    return specs


# ---------------------------------------------------------------------------
# inference records


def grounded_masks(sp: SamplePrediction, size, threshold: float = 0.5) -> list[tuple[np.ndarray, float]]:
    """Per condition, the mask of the query that scores it highest, with that probability."""
    with torch.no_grad():
        prob = sp.class_logits.softmax(-1)
        masks = upsample_masks(sp.masks, size).sigmoid() > threshold
    out = []
    for s in range(prob.shape[1] - 1):
        q = int(prob[:, s].argmax())
        out.append((masks[q].cpu().numpy(), float(prob[q, s])))
    return out


def predict_record(model: UnifiedSegModel, sample: SegSample, index: int, decode: bool = True,
                   rng: np.random.Generator | None = None) -> dict:
    seq, sp, fallback = model.predict(sample, decode=decode, rng=rng)
    rec = {
        "index": index,
        "task": sample.task,
        "response": model.vocab.decode(seq.response),
        "fallback": bool(fallback),
        "instances": [],
        "grounded": [],
    }
    if sp is not None:
        size = sample.image.shape[:2]
        for inst in predict_instances(sp, size):
            rec["instances"].append({"condition": inst.label, "confidence": round(inst.confidence, 6),
                                     "query": inst.query, "rle": geometry.rle_encode(inst.mask)})
        for m, p in grounded_masks(sp, size):
            rec["grounded"].append({"confidence": round(p, 6), "rle": geometry.rle_encode(m)})
    return rec


def predict_dataset(model: UnifiedSegModel, samples: Sequence[SegSample], decode: bool = True,
                    seed: int = 0) -> list[dict]:
    model.eval()
    rng = np.random.default_rng(seed)
    return [predict_record(model, s, i, decode, rng) for i, s in enumerate(samples)]


def segmentor_records(model: UnifiedSegModel, samples: Sequence[SegSample]) -> list[dict]:
    """Generic records from the segmentor alone, classified against the stage-1 category vectors.

    Labels are category ids, so score against all-category samples (``trainer.as_generic``).
    """
    model.eval()
    out = []
    for i, s in enumerate(samples):
        with torch.no_grad():
            sp = model.segmentor_forward(images_to_tensor([s.image], model.class_vectors.dtype)).sample(0)
        inst = [{"condition": x.label, "confidence": round(x.confidence, 6), "query": x.query,
                 "rle": geometry.rle_encode(x.mask)} for x in predict_instances(sp, s.image.shape[:2])]
        out.append({"index": i, "task": "generic", "response": "", "fallback": False,
                    "instances": inst, "grounded": []})
    return out


def save_records(path, records: Sequence[dict]):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def load_records(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"prediction file not found: {p}")
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def records_from_ground_truth(samples: Sequence[SegSample]) -> list[dict]:
    """Oracle records: every ground-truth region as a confidence-1 instance."""
    out = []
    for i, s in enumerate(samples):
        inst = [{"condition": int(lbl), "confidence": 1.0, "query": k, "rle": geometry.rle_encode(m)}
                for k, (lbl, m) in enumerate(zip(s.labels, s.masks))]
        n_cond = max(s.labels) + 1 if s.labels else 0
        grounded = []
        for c in range(n_cond):
            m = np.zeros(s.image.shape[:2], bool)
            for lbl, mm in zip(s.labels, s.masks):
                if lbl == c:
                    m |= mm
            grounded.append({"confidence": 1.0, "rle": geometry.rle_encode(m)})
        out.append({"index": i, "task": s.task, "response": "", "fallback": False,
                    "instances": inst, "grounded": grounded})
    return out


def _detections(rec) -> list[tuple[int, np.ndarray, float]]:
    return [(d["condition"], geometry.rle_decode(d["rle"]), d["confidence"]) for d in rec["instances"]]


# ---------------------------------------------------------------------------
# per-task metrics


def evaluate_task(task: str, records: Sequence[dict], samples: Sequence[SegSample]) -> dict:
    if len(records) != len(samples):
        raise ev.MetricError(f"{len(records)} prediction records for {len(samples)} samples")
    if task not in SEG_TASKS:
        raise ev.MetricError(f"no segmentation metrics for task {task!r}")
    shape = samples[0].image.shape[:2] if samples else (0, 0)
    if task == "generic":
        pan_p, pan_g, sem_p, sem_g, det, gts = [], [], [], [], [], []
        for rec, s in zip(records, samples):
            insts = [_as_instance(d) for d in rec["instances"]]
            _, kept = panoptic_merge(insts, shape)
            segs = [(i.label, i.mask) for i in kept]
            gt = list(zip(s.labels, s.masks))
            pan_p.append(segs)
            pan_g.append(gt)
            sem_p.append(ev.semantic_map(segs, shape))
            sem_g.append(ev.semantic_map(gt, shape))
            det.append(_detections(rec))
            gts.append(gt)
        ap = ev.average_precision(det, gts)
        return {"PQ": ev.panoptic_quality(pan_p, pan_g).pq, "mIoU": ev.mean_iou(sem_p, sem_g),
                "AP": ap["AP"], "AP50": ap["AP50"]}
    if task in ("referring", "reasoning"):
        preds = [geometry.rle_decode(r["grounded"][0]["rle"]) if r["grounded"] else np.zeros(shape, bool)
                 for r in records]
        gts = [np.any(np.stack(s.masks), 0) for s in samples]
        ciou, giou = ev.ciou_giou(preds, gts)
        return {"cIoU": ciou, "gIoU": giou}
    if task == "gcg":
        ious, det, gts = [], [], []
        for rec, s in zip(records, samples):
            for lbl, m in zip(s.labels, s.masks):
                g = rec["grounded"][lbl] if lbl < len(rec["grounded"]) else None
                ious.append(geometry.iou(geometry.rle_decode(g["rle"]), m) if g else 0.0)
            det.append(_detections(rec))
            gts.append(list(zip(s.labels, s.masks)))
        return {"mIoU": float(np.mean(ious)), "AP50": ev.average_precision(det, gts, (0.5,))["AP"]}
    if task == "interactive":
        res = ev.eval_interactive([_detections(r) for r in records],
                                  [s.prompts[0].rendering for s in samples],
                                  [s.masks[0] for s in samples])
        return {"mIoU": res.miou, "cIoU": res.ciou}
    # vgd
    kinds = [{k: p.kind for k, p in enumerate(s.prompts)} for s in samples]
    return ev.eval_vgd([_detections(r) for r in records], [list(zip(s.labels, s.masks)) for s in samples], kinds)


def _as_instance(d):
    from .maskdecoder import Instance
    return Instance(d["condition"], geometry.rle_decode(d["rle"]), d["confidence"], d.get("query", -1))


def evaluate_corpus(model_hash: str, records: dict[str, Sequence[dict]],
                    datasets: dict[str, Sequence[SegSample]]) -> ev.MetricReport:
    report = ev.MetricReport(config_hash=model_hash)
    for task in sorted(records):
        if task in CHAT_TASKS:
            continue
        report.add(task, evaluate_task(task, records[task], datasets[task]), len(datasets[task]))
    report.check_range()
    return report


# ---------------------------------------------------------------------------
# end to end


@dataclass
class PipelineResult:
    report: ev.MetricReport
    curves: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    model: UnifiedSegModel | None = None


def stage1_dataset(train: dict[str, Sequence[SegSample]]) -> list[SegSample]:
    """Every training image as an all-category sample built from its full scene annotation."""
    out = []
    for task in sorted(train):
        out.extend(trainer.as_generic(s) for s in train[task])
    return out


def run_pipeline(cfg: RunConfig, train: dict[str, Sequence[SegSample]], evalset: dict[str, Sequence[SegSample]],
                 decode: bool = True, log=None) -> PipelineResult:
    say = log or (lambda msg: None)
    timings, curves = {}, {}
    t0 = time.time()
    r1 = trainer.run_stage1(cfg, stage1_dataset(train))
    timings["stage1"] = time.time() - t0
    curves["stage 1"] = r1.losses
    say(f"stage 1: {r1.steps} steps, loss {r1.final_loss:.4f}, {timings['stage1']:.0f}s")

    t0 = time.time()
    captions = [s for t in CHAT_TASKS for s in train.get(t, [])]
    r2 = trainer.run_stage2(cfg, captions, r1.model)
    timings["stage2"] = time.time() - t0
    curves["stage 2"] = r2.losses
    say(f"stage 2: {r2.steps} steps, loss {r2.final_loss:.4f}, {timings['stage2']:.0f}s")

    t0 = time.time()
    r3 = trainer.run_stage3(cfg, dict(train), r2.model)
    timings["stage3"] = time.time() - t0
    curves["stage 3"] = r3.losses
    say(f"stage 3: {r3.steps} steps, loss {r3.final_loss:.4f}, {timings['stage3']:.0f}s")

    t0 = time.time()
    records = {task: predict_dataset(r3.model, samples, decode) for task, samples in evalset.items()}
    report = evaluate_corpus(cfg.model_hash(), records, evalset)
    timings["eval"] = time.time() - t0
    return PipelineResult(report, curves, timings, r3.model)
