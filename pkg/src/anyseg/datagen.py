"""Procedural shape corpus, task-sample builders and dataset balance resampling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import geometry
from .prompt_format import (
    ALL_TASKS, COLORS, DEFAULT_VOCAB, NUMBER_WORDS, SHAPES, TokenSequence, Vocabulary,
    build_chat, build_text_query, build_vision_query,
)

PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.15),
}


def category_names(shapes=SHAPES, colors=COLORS) -> list[str]:
    return [f"{c} {s}" for s in shapes for c in colors]


CATEGORIES = category_names()


class DataError(ValueError):
    pass


@dataclass
class SceneConfig:
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    min_radius: float = 5.0
    max_radius: float = 11.0
    min_area: int = 16
    gap: int = 1
    noise: float = 0.03
    color_jitter: float = 0.08
    max_retries: int = 60


@dataclass
class SegSample:
    image: np.ndarray                       # (H, W, 3) float32 in [0, 1]
    task: str
    tokens: TokenSequence                   # instruction followed by target response
    regions: list[tuple[int, np.ndarray]]   # (category_id, mask)
    labels: list[int] = field(default_factory=list)   # condition-span index per region
    prompts: list[geometry.VisualPrompt] | None = None
    meta: dict = field(default_factory=dict)
    scene_regions: list[tuple[int, np.ndarray]] | None = None   # every instance in the image

    @property
    def instruction(self) -> TokenSequence:
        return TokenSequence(self.tokens.instruction, self.tokens.prompt_len, self.task)

    @property
    def response_target(self) -> TokenSequence:
        return self.tokens

    @property
    def masks(self) -> list[np.ndarray]:
        return [m for _, m in self.regions]


@dataclass
class Scene:
    image: np.ndarray
    regions: list[tuple[int, np.ndarray]]


def _shape_mask(kind: str, cx: float, cy: float, r: float, yy, xx) -> np.ndarray:
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xx - cx) <= r * 0.9) & (np.abs(yy - cy) <= r * 0.9)
    if kind == "triangle":
        return (yy <= cy + r) & (yy >= cy - r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.6)
    raise DataError(f"unknown shape {kind!r}")


def _background(rng, size, noise):
    base = rng.uniform(0.25, 0.5)
    yy, xx = np.mgrid[:size, :size] / size
    freq = rng.uniform(2, 6)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    stripes = 0.04 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    img = base + stripes[..., None] + rng.normal(0, noise, (size, size, 3))
    return img


def generate_scene(rng: np.random.Generator, cfg: SceneConfig | None = None) -> Scene:
    """Non-overlapping colored shapes on a textured background.

    Category id is ``shape_index * len(COLORS) + color_index``. Scenes whose shapes cannot
    be placed within ``cfg.max_retries`` attempts are regenerated from scratch.
    """
    cfg = cfg or SceneConfig()
    size = cfg.size
    yy, xx = np.mgrid[:size, :size]
    while True:
        n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        cats = rng.integers(0, len(CATEGORIES), n)
        occupied = np.zeros((size, size), dtype=bool)
        regions = []
        for cat in cats:
            shape = SHAPES[cat // len(COLORS)]
            for _ in range(cfg.max_retries):
                r = rng.uniform(cfg.min_radius, cfg.max_radius)
                cx, cy = rng.uniform(r, size - 1 - r, 2)
                m = _shape_mask(shape, cx, cy, r, yy, xx)
                if m.sum() >= cfg.min_area and not (geometry.dilate(m, cfg.gap) & occupied).any():
                    break
            else:
                break
            occupied |= m
            regions.append((int(cat), m))
        if len(regions) == n:
            break
    img = _background(rng, size, cfg.noise)
    for cat, m in regions:
        color = np.asarray(PALETTE[COLORS[cat % len(COLORS)]])
        color = color + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        img[m] = color + rng.normal(0, cfg.noise, (int(m.sum()), 3))
    img = np.clip(img, 0, 1)
    # quantize so the in-memory image equals its 8-bit file
    img = (np.round(img * 255) / 255).astype(np.float32)
    return Scene(img, regions)


def _centroid_x(m):
    return float(np.nonzero(m)[1].mean())


def make_generic(scene: Scene, vocab: Vocabulary = DEFAULT_VOCAB,
                 categories: Sequence[int] | None = None) -> SegSample:
    """All-category request; ``categories`` restricts the listed label set."""
    cats = list(range(len(CATEGORIES))) if categories is None else list(categories)
    seq = build_text_query("generic", [CATEGORIES[c] for c in cats], vocab)
    regions = [(c, m) for c, m in scene.regions if c in cats]
    labels = [cats.index(c) for c, _ in regions]
    return SegSample(scene.image, "generic", seq, regions, labels, meta={"categories": cats})


def make_referring(scene: Scene, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample | None:
    cats = [c for c, _ in scene.regions]
    unique = [i for i, c in enumerate(cats) if cats.count(c) == 1]
    if not unique:
        return None
    i = unique[rng.integers(len(unique))]
    cat, m = scene.regions[i]
    seq = build_text_query("referring", [CATEGORIES[cat]], vocab)
    return SegSample(scene.image, "referring", seq, [(cat, m)], [0], meta={"target": i})


def make_reasoning(scene: Scene, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample | None:
    """Phrases that name a derived property instead of the category."""
    areas = [int(m.sum()) for _, m in scene.regions]
    colors = [COLORS[c % len(COLORS)] for c, _ in scene.regions]
    shapes = [SHAPES[c // len(COLORS)] for c, _ in scene.regions]
    options = []
    order = np.argsort(areas)
    if len(areas) > 1 and areas[order[-1]] > 1.2 * areas[order[-2]]:
        options.append(("the largest shape", int(order[-1])))
    if len(areas) > 1 and areas[order[1]] > 1.2 * areas[order[0]]:
        options.append(("the smallest shape", int(order[0])))
    for i, col in enumerate(colors):
        if colors.count(col) == 1:
            options.append((f"the {col} shape", i))
    for i, sh in enumerate(shapes):
        if shapes.count(sh) == 1:
            options.append((f"the {sh}", i))
    if not options:
        return None
    phrase, i = options[rng.integers(len(options))]
    seq = build_text_query("reasoning", [phrase], vocab)
    return SegSample(scene.image, "reasoning", seq, [scene.regions[i]], [0], meta={"target": i})


def make_gcg(scene: Scene, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    regions = sorted(scene.regions, key=lambda r: _centroid_x(r[1]))
    phrases = [f"a {CATEGORIES[c]}" for c, _ in regions]
    seq = build_text_query("gcg", phrases, vocab)
    return SegSample(scene.image, "gcg", seq, regions, list(range(len(regions))))


def make_interactive(scene: Scene, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    i = int(rng.integers(len(scene.regions)))
    cat, m = scene.regions[i]
    kind = geometry.PROMPT_KINDS[rng.integers(len(geometry.PROMPT_KINDS))]
    prompt = geometry.rasterize_prompt(kind, m, rng, source_instance=i)
    seq = build_vision_query("interactive", 1, vocab)
    return SegSample(scene.image, "interactive", seq, [(cat, m)], [0], [prompt], meta={"target": i})


def build_vgd_sample(base, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    """One visual prompt per present category; ground truth is every instance of those categories."""
    regions = base.regions
    if not regions:
        raise DataError("VGD sample needs at least one region")
    cats = sorted({c for c, _ in regions})
    prompts, gt, labels = [], [], []
    for span, cat in enumerate(cats):
        members = [i for i, (c, _) in enumerate(regions) if c == cat]
        kind = geometry.PROMPT_KINDS[rng.integers(len(geometry.PROMPT_KINDS))]
        src = members[rng.integers(len(members))]
        prompts.append(geometry.rasterize_prompt(kind, regions[src][1], rng, source_instance=src))
        for i in members:
            gt.append(regions[i])
            labels.append(span)
    seq = build_vision_query("vgd", len(cats), vocab)
    return SegSample(base.image, "vgd", seq, gt, labels, prompts, meta={"categories": cats})


def _count_word(n):
    return NUMBER_WORDS[n] if n < len(NUMBER_WORDS) else str(n)


def make_conversation(scene: Scene, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    if rng.random() < 0.5:
        n = len(scene.regions)
        q, a = "how many shapes are there ?", f"there are {_count_word(n)} shapes ."
    else:
        cat = int(rng.integers(len(CATEGORIES)))
        present = any(c == cat for c, _ in scene.regions)
        q, a = f"is there a {CATEGORIES[cat]} ?", "yes ." if present else "no ."
    return SegSample(scene.image, "conversation", build_chat("conversation", q, a, vocab), [], [])


def make_caption(scene: Scene, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    regions = sorted(scene.regions, key=lambda r: _centroid_x(r[1]))
    names = [f"a {CATEGORIES[c]}" for c, _ in regions]
    text = names[0] if len(names) == 1 else " , ".join(names[:-1]) + " and " + names[-1]
    seq = build_chat("caption", "describe this picture .", f"{text} .", vocab)
    return SegSample(scene.image, "caption", seq, [], [])


def make_task_sample(task: str, scene: Scene, rng, vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample | None:
    sample = _dispatch(task, scene, rng, vocab)
    if sample is not None:
        sample.scene_regions = list(scene.regions)
    return sample


def _dispatch(task, scene, rng, vocab):
    if task == "generic":
        return make_generic(scene, vocab)
    if task == "referring":
        return make_referring(scene, rng, vocab)
    if task == "reasoning":
        return make_reasoning(scene, rng, vocab)
    if task == "gcg":
        return make_gcg(scene, vocab)
    if task == "interactive":
        return make_interactive(scene, rng, vocab)
    if task == "vgd":
        return build_vgd_sample(scene, rng, vocab)
    if task == "conversation":
        return make_conversation(scene, rng, vocab)
    if task == "caption":
        return make_caption(scene, vocab)
    raise DataError(f"unknown task {task!r}; expected one of {ALL_TASKS}")


def generate_task_sample(task: str, rng, cfg: SceneConfig | None = None,
                         vocab: Vocabulary = DEFAULT_VOCAB) -> SegSample:
    while True:
        sample = make_task_sample(task, generate_scene(rng, cfg), rng, vocab)
        if sample is not None:
            return sample


# ---------------------------------------------------------------------------
# dataset balance resampling


@dataclass
class DatasetSpec:
    name: str
    size: int
    task_kind: str
    frequency: float = 0.0


def with_frequencies(specs: Sequence[DatasetSpec]) -> list[DatasetSpec]:
    total = sum(s.size for s in specs)
    return [DatasetSpec(s.name, s.size, s.task_kind, s.size / total) for s in specs]


def repeat_factor(t: float, f_d: float) -> float:
    if f_d <= 0:
        raise DataError(f"dataset frequency must be positive, got {f_d}")
    if t < 0:
        raise DataError(f"oversampling ratio must be non-negative, got {t}")
    return max(1.0, math.sqrt(t / f_d))


def build_epoch_index(specs: Sequence[DatasetSpec], t: float, rng: np.random.Generator,
                      batch_size: int = 1) -> list[list[tuple[int, int]]]:
    """Resampled epoch as a shuffled list of single-source batches of ``(dataset, sample)``.

    Dataset ``d`` contributes exactly ``ceil(r_d * n_d)`` entries: every sample ``floor(r_d)``
    times plus a seeded draw without replacement of the remaining samples.
    """
    if any(s.size < 1 for s in specs):
        raise DataError("every dataset needs at least one sample")
    total = sum(s.frequency for s in specs)
    if not math.isclose(total, 1.0, rel_tol=1e-9, abs_tol=1e-9):
        raise DataError(f"dataset frequencies sum to {total}, expected 1")
    batches = []
    for d, spec in enumerate(specs):
        r = repeat_factor(t, spec.frequency)
        n = spec.size
        target = math.ceil(r * n - 1e-9)
        whole = math.floor(r + 1e-12)
        idx = np.tile(np.arange(n), whole)
        extra = target - idx.size
        if extra > 0:
            idx = np.concatenate([idx, rng.choice(n, size=extra, replace=False)])
        idx = idx[rng.permutation(idx.size)]
        for start in range(0, idx.size, batch_size):
            batches.append([(d, int(i)) for i in idx[start:start + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# on-disk layout: images/, annotations.jsonl, spec.json


def sample_to_record(sample: SegSample, image_file: str) -> dict:
    rec = {
        "image": image_file,
        "task": sample.task,
        "ids": list(sample.tokens.ids),
        "prompt_len": sample.tokens.prompt_len,
        "regions": [
            {"category": int(c), "label": int(lbl), "rle": geometry.rle_encode(m)}
            for (c, m), lbl in zip(sample.regions, sample.labels)
        ],
        "meta": sample.meta,
    }
    if sample.scene_regions is not None:
        rec["scene"] = [{"category": int(c), "rle": geometry.rle_encode(m)} for c, m in sample.scene_regions]
    if sample.prompts is not None:
        rec["prompts"] = [
            {"kind": p.kind, "source": int(p.source_instance), "rle": geometry.rle_encode(p.rendering)}
            for p in sample.prompts
        ]
    return rec


def record_to_sample(rec: dict, image: np.ndarray) -> SegSample:
    regions = [(r["category"], geometry.rle_decode(r["rle"])) for r in rec["regions"]]
    labels = [r["label"] for r in rec["regions"]]
    prompts = None
    if "prompts" in rec:
        prompts = [geometry.VisualPrompt(p["kind"], geometry.rle_decode(p["rle"]), p["source"])
                   for p in rec["prompts"]]
    seq = TokenSequence(tuple(rec["ids"]), rec["prompt_len"], rec["task"])
    scene = None
    if "scene" in rec:
        scene = [(r["category"], geometry.rle_decode(r["rle"])) for r in rec["scene"]]
    return SegSample(image, rec["task"], seq, regions, labels, prompts, rec.get("meta", {}), scene)


def save_dataset(out_dir, samples: Sequence[SegSample], spec: DatasetSpec) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "annotations.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            name = f"{i:06d}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out / "images" / name)
            fh.write(json.dumps(sample_to_record(s, f"images/{name}"), sort_keys=True) + "\n")
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir) -> tuple[list[SegSample], DatasetSpec]:
    root = Path(data_dir)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"{root}: missing annotations.jsonl")
    try:
        spec = DatasetSpec(**json.loads((root / "spec.json").read_text()))
    except FileNotFoundError as e:
        raise DataError(f"{root}: missing spec.json") from e
    samples = []
    images = {}
    for line in ann.read_text().splitlines():
        rec = json.loads(line)
        if rec["image"] not in images:
            with Image.open(root / rec["image"]) as im:
                images[rec["image"]] = (np.asarray(im.convert("RGB"), dtype=np.float32) / 255).astype(np.float32)
        samples.append(record_to_sample(rec, images[rec["image"]]))
    return samples, spec


def generate_datasets(sizes: dict[str, int], seed: int, cfg: SceneConfig | None = None,
                      vocab: Vocabulary = DEFAULT_VOCAB) -> dict[str, list[SegSample]]:
    """Independent per-task datasets; each task draws from its own seeded stream."""
    out = {}
    for k, (task, n) in enumerate(sizes.items()):
        rng = np.random.default_rng([seed, k, ALL_TASKS.index(task)])
        out[task] = [generate_task_sample(task, rng, cfg, vocab) for _ in range(n)]
    return out


def write_corpus(out_dir, sizes: dict[str, int], seed: int, cfg: SceneConfig | None = None) -> list[DatasetSpec]:
    data = generate_datasets(sizes, seed, cfg)
    specs = with_frequencies([DatasetSpec(t, len(s), t) for t, s in data.items()])
    for spec in specs:
        save_dataset(Path(out_dir) / spec.name, data[spec.name], spec)
    return specs


def load_corpus(root) -> dict[str, list[SegSample]]:
    root = Path(root)
    if (root / "annotations.jsonl").exists():
        samples, spec = load_dataset(root)
        return {spec.name: samples}
    dirs = sorted(p for p in root.iterdir() if (p / "annotations.jsonl").exists()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no datasets found")
    out = {}
    for p in dirs:
        samples, spec = load_dataset(p)
        out[spec.name] = samples
    return out
