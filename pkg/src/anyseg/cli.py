"""``anyseg`` command line: datagen, train, predict, eval, infer, pipeline.

Every command writes a ``manifest.json`` (or ``<report>.manifest.json``) describing the run.
Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from . import geometry, pipeline, plotting, trainer
from .config import ConfigError, RunConfig, load_config
from .datagen import CATEGORIES, DataError, Scene, SegSample, load_corpus, make_task_sample
from .model import UnifiedSegModel
from .prompt_format import (
    SEG_TASKS, TEXT_TASKS, VISION_TASKS, build_chat, build_text_query, build_vision_query,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    checkpoint_hash: str | None = None
    status: str = "ok"
    error: str | None = None

    def write(self, path):
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def file_hash(path) -> str | None:
    p = Path(path)
    if not p.exists():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    from dataclasses import replace
    return replace(cfg, stage1=replace(cfg.stage1, seed=seed), stage2=replace(cfg.stage2, seed=seed),
                   stage3=replace(cfg.stage3, seed=seed))


def _load_model(cfg: RunConfig, ckpt_path) -> tuple[UnifiedSegModel, dict]:
    payload = trainer.load_checkpoint(ckpt_path, cfg)
    torch.manual_seed(0)
    model = UnifiedSegModel(cfg.model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trainer.load_into(model, payload)
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(args, man: RunManifest):
    sizes = dict(pipeline.TRAIN_SIZES if args.split == "train" else pipeline.EVAL_SIZES)
    tasks = [t for item in args.tasks or () for t in item.split(",") if t]
    if tasks:
        unknown = set(tasks) - set(pipeline.TRAIN_SIZES)
        if unknown:
            raise UsageError(f"unknown tasks: {sorted(unknown)}")
        sizes = {t: sizes.get(t, pipeline.TRAIN_SIZES[t]) for t in tasks}
    if args.n is not None:
        if args.n < 1:
            raise UsageError("--n must be positive")
        sizes = {t: args.n for t in sizes}
    elif args.scale != 1.0:
        sizes = pipeline.scaled_sizes(sizes, args.scale)
    specs = pipeline.write_split(args.out, sizes, args.seed)
    man.outputs = {"dir": str(args.out), "datasets": {s.name: s.size for s in specs}}
    print(json.dumps(man.outputs["datasets"], sort_keys=True))


def cmd_train(args, man: RunManifest):
    cfg = _with_seed(_config(args), args.seed)
    man.config_hash = cfg.model_hash()
    if args.stage > 1 and not args.ckpt:
        raise UsageError(f"stage {args.stage} needs --ckpt from stage {args.stage - 1}")
    data = load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        result = trainer.run_stage1(cfg, pipeline.stage1_dataset(data))
    else:
        model, payload = _load_model(cfg, args.ckpt)
        if payload["stage"] != args.stage - 1:
            raise UsageError(f"--ckpt is a stage-{payload['stage']} checkpoint; stage {args.stage} "
                             f"needs stage {args.stage - 1}")
        if args.stage == 2:
            captions = [s for t in ("conversation", "caption") for s in data.get(t, [])]
            result = trainer.run_stage2(cfg, captions, model)
        else:
            result = trainer.run_stage3(cfg, data, model)
    ckpt = out / f"stage{args.stage}.pt"
    trainer.save_checkpoint(ckpt, result.model, args.stage, cfg, result.optimizer, losses=result.losses,
                            keys=trainer.checkpoint_keys(args.stage))
    (out / f"stage{args.stage}_losses.json").write_text(json.dumps(result.losses) + "\n")
    plotting.save_loss_curves(out / f"stage{args.stage}_loss.png", {f"stage {args.stage}": result.losses})
    man.inputs = {"data": str(args.data), "ckpt": args.ckpt, "config": args.config}
    man.outputs = {"checkpoint": str(ckpt), "steps": result.steps, "final_loss": result.final_loss}
    man.checkpoint_hash = file_hash(ckpt)
    print(f"stage {args.stage}: {result.steps} steps, final loss {result.final_loss:.4f} -> {ckpt}")


def cmd_predict(args, man: RunManifest):
    cfg = _config(args)
    man.config_hash = cfg.model_hash()
    model, _ = _load_model(cfg, args.ckpt)
    data = load_corpus(args.data)
    out = Path(args.out)
    for task, samples in sorted(data.items()):
        if task not in SEG_TASKS:
            continue
        records = pipeline.predict_dataset(model, samples, decode=not args.no_decode, seed=args.seed)
        pipeline.save_records(out / f"{task}.jsonl", records)
    man.inputs = {"data": str(args.data), "ckpt": args.ckpt}
    man.outputs = {"dir": str(out)}
    man.checkpoint_hash = file_hash(args.ckpt)


def cmd_eval(args, man: RunManifest):
    data = load_corpus(args.data)
    tasks = [args.task] if args.task else sorted(t for t in data if t in SEG_TASKS)
    records, sets = {}, {}
    for task in tasks:
        if task not in data:
            raise DataError(f"task {task!r} not found under {args.data}")
        if args.oracle:
            records[task] = pipeline.records_from_ground_truth(data[task])
        else:
            records[task] = pipeline.load_records(Path(args.pred) / f"{task}.jsonl")
        sets[task] = data[task]
    cfg_hash = _config(args).model_hash()
    report = pipeline.evaluate_corpus(cfg_hash, records, sets)
    man.config_hash = cfg_hash
    rp = Path(args.report)
    rp.parent.mkdir(parents=True, exist_ok=True)
    rp.write_text(report.to_json())
    if args.overlays:
        _write_overlays(rp.parent / "overlays", records, sets, args.overlays)
    man.inputs = {"data": str(args.data), "pred": args.pred}
    man.outputs = {"report": str(rp)}
    print(report.to_text(), end="")


def _write_overlays(out_dir, records, sets, n):
    for task, recs in records.items():
        for rec, s in list(zip(recs, sets[task]))[:n]:
            masks = [geometry.rle_decode(d["rle"]) for d in rec["instances"]]
            plotting.save_overlay(Path(out_dir) / f"{task}_{rec['index']:04d}.png", s.image, masks, s.masks,
                                  title=f"{task}: {rec.get('response', '')}")


def _infer_sample(args, image) -> SegSample:
    task = args.task
    if task in TEXT_TASKS:
        if task == "gcg":
            phrases = ["a object"]
            seq = build_text_query("gcg", phrases)
        else:
            if not args.query:
                raise UsageError(f"--query is required for task {task}")
            phrases = [q.strip() for q in args.query.split(";") if q.strip()]
            seq = build_text_query(task, phrases)
        return SegSample(image, task, seq, [], [])
    if task in VISION_TASKS:
        if not args.prompt:
            raise UsageError(f"--prompt FILE is required for task {task}")
        prompts = load_prompt_file(args.prompt, image.shape[:2])
        return SegSample(image, task, build_vision_query(task, len(prompts)), [], [], prompts)
    if task in ("conversation", "caption"):
        return SegSample(image, task, build_chat(task, args.query or "describe this picture briefly .", "."), [], [])
    raise UsageError(f"unknown task {task!r}")


def load_prompt_file(path, shape) -> list[geometry.VisualPrompt]:
    """JSON list of prompts: ``{"kind": "point", "xy": [x, y]}``, ``{"kind": "box", "box": [x0, y0, x1, y1]}``,
    ``{"kind": "scribble", "points": [[x, y], ...]}`` or ``{"kind": "mask", "rle": {...}}``."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"prompt file not found: {p}")
    items = json.loads(p.read_text())
    if isinstance(items, dict):
        items = [items]
    h, w = shape
    out = []
    for it in items:
        kind = it.get("kind")
        m = np.zeros((h, w), bool)
        if kind == "point":
            x, y = it["xy"]
            m[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = True
        elif kind == "box":
            m = geometry.Box(*it["box"]).to_mask(h, w)
        elif kind == "scribble":
            for x, y in it["points"]:
                m[y, x] = True
        elif kind == "mask":
            m = geometry.rle_decode(it["rle"])
        else:
            raise DataError(f"unknown prompt kind {kind!r}")
        if not m.any():
            raise DataError(f"prompt {it} rasterizes to an empty mask")
        out.append(geometry.VisualPrompt(kind, m))
    return out


def cmd_infer(args, man: RunManifest):
    from PIL import Image
    cfg = _config(args)
    man.config_hash = cfg.model_hash()
    model, _ = _load_model(cfg, args.ckpt)
    ip = Path(args.image)
    if not ip.exists():
        raise DataError(f"image not found: {ip}")
    with Image.open(ip) as im:
        image = (np.asarray(im.convert("RGB"), dtype=np.float32) / 255).astype(np.float32)
    if image.shape[0] != cfg.model.image_size or image.shape[1] != cfg.model.image_size:
        raise DataError(f"image is {image.shape[1]}x{image.shape[0]}, model expects "
                        f"{cfg.model.image_size}x{cfg.model.image_size}")
    sample = _infer_sample(args, image)
    torch.manual_seed(args.seed)
    rec = pipeline.predict_record(model, sample, 0, decode=not args.no_decode,
                                  rng=np.random.default_rng(args.seed))
    if sample.task in ("referring", "reasoning", "interactive"):
        rec["instances"] = _top_per_condition(rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "instances.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    masks = [geometry.rle_decode(d["rle"]) for d in rec["instances"]]
    plotting.save_overlay(out / "overlay.png", image, masks, title=rec["response"],
                          labels=[f"#{d['condition']} {d['confidence']:.2f}" for d in rec["instances"]])
    man.inputs = {"image": str(ip), "ckpt": args.ckpt, "query": args.query, "prompt": args.prompt}
    man.outputs = {"dir": str(out), "instances": len(rec["instances"])}
    man.checkpoint_hash = file_hash(args.ckpt)
    print(rec["response"])
    print(f"{len(rec['instances'])} instance(s) -> {out / 'instances.json'}")


def _top_per_condition(rec) -> list[dict]:
    """Single-target tasks: one instance per condition (its grounded mask)."""
    out = []
    for c, g in enumerate(rec["grounded"]):
        if geometry.rle_decode(g["rle"]).any():
            out.append({"condition": c, "confidence": g["confidence"], "query": -1, "rle": g["rle"]})
    return out


def cmd_pipeline(args, man: RunManifest):
    cfg = _with_seed(_config(args), args.seed)
    man.config_hash = cfg.model_hash()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_sizes = pipeline.scaled_sizes(pipeline.TRAIN_SIZES, args.scale)
    eval_sizes = pipeline.scaled_sizes(pipeline.EVAL_SIZES, args.scale)
    pipeline.write_split(out / "data" / "train", train_sizes, args.seed)
    pipeline.write_split(out / "data" / "eval", eval_sizes, args.seed + pipeline.EVAL_SEED_OFFSET)
    train = load_corpus(out / "data" / "train")
    evalset = load_corpus(out / "data" / "eval")
    res = pipeline.run_pipeline(cfg, train, evalset, decode=not args.no_decode,
                                log=lambda msg: print(msg, flush=True))
    (out / "report.json").write_text(res.report.to_json())
    plotting.save_loss_curves(out / "loss_curves.png", res.curves)
    ckpt = out / "final.pt"
    trainer.save_checkpoint(ckpt, res.model, 3, cfg)
    man.outputs = {"report": str(out / "report.json"), "checkpoint": str(ckpt),
                   "timings": {k: round(v, 1) for k, v in res.timings.items()}}
    man.checkpoint_hash = file_hash(ckpt)
    print(res.report.to_text(), end="")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anyseg", description="Toy unified segmentation MLLM")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--tasks", nargs="*", default=None, help="task names, space- or comma-separated")
    p.add_argument("--n", type=int, default=None, help="samples per task (overrides the split sizes)")
    p.add_argument("--scale", type=float, default=1.0, help="multiply every dataset size")

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="checkpoint from the previous stage")

    p = sub.add_parser("predict", help="write inference records for a corpus")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--no-decode", action="store_true", help="use template responses")

    p = sub.add_parser("eval", help="score inference records")
    common(p, out_required=False)
    p.add_argument("--task", default=None)
    p.add_argument("--pred", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--oracle", action="store_true", help="score ground truth as predictions")
    p.add_argument("--overlays", type=int, default=0, help="render this many overlays per task")

    p = sub.add_parser("infer", help="single-image inference with an overlay")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--query", default=None, help="phrase(s) for text tasks, ';'-separated")
    p.add_argument("--prompt", default=None, help="JSON prompt file for vision tasks")
    p.add_argument("--no-decode", action="store_true")

    p = sub.add_parser("pipeline", help="datagen + three stages + eval")
    common(p)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--no-decode", action="store_true")
    return ap


COMMANDS = {
    "datagen": cmd_datagen, "train": cmd_train, "predict": cmd_predict,
    "eval": cmd_eval, "infer": cmd_infer, "pipeline": cmd_pipeline,
}


def _manifest_path(args) -> Path:
    if args.command == "eval":
        return Path(args.report).with_suffix(".manifest.json")
    return Path(args.out) / "manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    man = RunManifest(args.command, "", args.seed)
    t0 = time.time()
    code = EXIT_OK
    try:
        if args.command == "eval" and not args.oracle and not args.pred:
            raise UsageError("eval needs --pred DIR or --oracle")
        COMMANDS[args.command](args, man)
    except (UsageError, ConfigError) as e:
        code, man.error = EXIT_USAGE, str(e)
    except (DataError, FileNotFoundError, ev.MetricError, trainer.CheckpointError) as e:
        code, man.error = EXIT_DATA, str(e)
    except trainer.DivergenceError as e:
        code, man.error = EXIT_NUMERIC, str(e)
    except (FloatingPointError, ArithmeticError) as e:
        code, man.error = EXIT_NUMERIC, str(e)
    if code:
        man.status = "error"
        print(f"anyseg {args.command}: error: {man.error}", file=sys.stderr)
    man.wall_clock_s = round(time.time() - t0, 3)
    if not man.config_hash:
        try:
            man.config_hash = _config(args).model_hash()
        except ConfigError:
            pass
    man.write(_manifest_path(args))
    return code


if __name__ == "__main__":
    sys.exit(main())
