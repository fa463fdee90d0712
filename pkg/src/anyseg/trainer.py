"""Three-stage training: segmentor fine-tuning, projector alignment, mixed fine-tuning.

Each stage builds AdamW parameter groups from the model's top-level modules, runs a linear
warmup + cosine schedule, clips gradients, and records a loss curve. Frozen groups have
``requires_grad`` switched off so they stay bitwise unchanged.
"""
from __future__ import annotations

import hashlib
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment
from .config import LossConfig, ModelConfig, RunConfig, StageConfig, config_hash
from .datagen import DatasetSpec, Scene, SegSample, build_epoch_index, make_generic, with_frequencies
from .model import DUAL_ENCODERS, LLM, PROJECTORS, SEGMENTOR, UnifiedSegModel, images_to_tensor

ALL_GROUPS = tuple(dict.fromkeys(DUAL_ENCODERS + PROJECTORS + SEGMENTOR + LLM))

# trainable top-level modules and the subset that runs at the reduced rate
TRAINABLE = {
    1: SEGMENTOR,
    2: ("image_projector", "seg_projector"),
    3: ALL_GROUPS,
}
LOW_LR = {
    1: ("seg_encoder",),
    2: (),
    3: DUAL_ENCODERS,
}


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised on a non-finite loss; ``result`` holds the model at its last finite state."""

    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


class CheckpointError(ValueError):
    pass


@dataclass
class StageResult:
    stage: int
    model: UnifiedSegModel
    optimizer: torch.optim.Optimizer
    losses: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1]["loss"] if self.losses else float("nan")


# ---------------------------------------------------------------------------
# optimizer plumbing


def set_trainable(model: UnifiedSegModel, stage: int) -> None:
    groups = TRAINABLE[stage]
    for name, p in model.named_parameters():
        p.requires_grad_(model.group_of(name) in groups)


def param_groups(model: UnifiedSegModel, stage: int, sc: StageConfig) -> list[dict]:
    low, high = [], []
    for name, p in model.named_parameters():
        g = model.group_of(name)
        if g not in TRAINABLE[stage]:
            continue
        (low if g in LOW_LR[stage] else high).append(p)
    groups = []
    if high:
        groups.append({"params": high, "lr": sc.lr, "name": "base"})
    if low:
        groups.append({"params": low, "lr": sc.lr * sc.encoder_lr_ratio, "name": "encoder"})
    return groups


def make_optimizer(model, stage: int, sc: StageConfig):
    opt = torch.optim.AdamW(param_groups(model, stage, sc), betas=(0.9, 0.999),
                            weight_decay=sc.weight_decay, foreach=True)
    warm = max(1, math.ceil(sc.warmup_ratio * sc.steps))

    def factor(k):
        if k < warm:
            return (k + 1) / warm
        return 0.5 * (1 + math.cos(math.pi * (k - warm) / max(1, sc.steps - warm)))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def snapshot(model) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def changed_groups(before: dict, model) -> set[str]:
    """Top-level modules with at least one tensor that differs bitwise from ``before``."""
    after = model.state_dict()
    return {k.split(".", 1)[0] for k, v in after.items() if not torch.equal(before[k], v)}


def _step(model, opt, sched, loss, sc: StageConfig, result: StageResult, extra: dict):
    if not torch.isfinite(loss):
        raise DivergenceError(f"stage {sc.stage}: non-finite loss at step {result.steps}", result)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in opt.param_groups for p in g["params"]]
    norm = torch.nn.utils.clip_grad_norm_(params, sc.clip_norm)
    if not torch.isfinite(norm):
        opt.zero_grad(set_to_none=True)
        raise DivergenceError(f"stage {sc.stage}: non-finite gradient at step {result.steps}", result)
    opt.step()
    sched.step()
    result.steps += 1
    result.losses.append({"step": result.steps, "loss": float(loss.detach()), **extra})


def _seed(sc: StageConfig):
    torch.manual_seed(sc.seed)
    return np.random.default_rng([sc.seed, sc.stage])


# ---------------------------------------------------------------------------
# stages


def as_generic(sample: SegSample) -> SegSample:
    """Generic all-category view of a sample's image, from its full scene annotation."""
    regions = sample.scene_regions if sample.scene_regions is not None else sample.regions
    return make_generic(Scene(sample.image, list(regions)))


def run_stage1(cfg: RunConfig, dataset: Sequence[SegSample], model: UnifiedSegModel | None = None,
               hook: Callable[[StageResult], None] | None = None) -> StageResult:
    """Segmentor-only training on generic samples with per-category class vectors as conditions."""
    sc = cfg.stage1
    if not dataset:
        raise TrainingError("stage 1 needs a non-empty generic dataset")
    bad = {s.task for s in dataset} - {"generic"}
    if bad:
        raise TrainingError(f"stage 1 expects generic samples, got {sorted(bad)}")
    rng = _seed(sc)
    model = model or UnifiedSegModel(cfg.model)
    model.train()
    set_trainable(model, 1)
    opt, sched = make_optimizer(model, 1, sc)
    result = StageResult(1, model, opt)
    n = len(dataset)
    order = np.empty(0, dtype=int)
    for _ in range(sc.steps):
        if order.size < sc.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:sc.batch_size], order[sc.batch_size:]
        images, targets = [], []
        for i in idx:
            s = dataset[int(i)]
            im, rg = s.image, list(s.regions)
            if sc.augment:
                im, rg = augment.augment_scene(im, rg, rng, sc.scale_min, sc.scale_max)
            images.append(im)
            targets.append(rg)
        out = model.segmentor_loss(images_to_tensor(images), targets, cfg.loss)
        _step(model, opt, sched, out.loss, sc, result, {"seg": out.terms.get("total", 0.0)})
        if hook:
            hook(result)
    return result


def run_stage2(cfg: RunConfig, dataset: Sequence[SegSample], model: UnifiedSegModel,
               hook: Callable[[StageResult], None] | None = None) -> StageResult:
    """Projector alignment on caption-style pairs; everything except the dual projectors is frozen."""
    sc = cfg.stage2
    if model is None:
        raise TrainingError("stage 2 needs the stage-1 model")
    if not dataset:
        raise TrainingError("stage 2 needs a non-empty caption dataset")
    rng = _seed(sc)
    model.train()
    set_trainable(model, 2)
    opt, sched = make_optimizer(model, 2, sc)
    result = StageResult(2, model, opt)
    n = len(dataset)
    order = np.empty(0, dtype=int)
    for _ in range(sc.steps):
        if order.size < sc.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:sc.batch_size], order[sc.batch_size:]
        out = model.forward_batch([dataset[int(i)] for i in idx], rng=rng, weights=cfg.loss)
        _step(model, opt, sched, out.loss, sc, result, {"ar": float(out.ar_loss.detach())})
        if hook:
            hook(result)
    return result


def run_stage3(cfg: RunConfig, datasets: dict[str, Sequence[SegSample]], model: UnifiedSegModel,
               hook: Callable[[StageResult], None] | None = None,
               epoch_hook: Callable[[StageResult, int], None] | None = None,
               reset_class_head: bool = True) -> StageResult:
    """Mixed fine-tuning over resampled single-source batches.

    Chat batches carry the auto-regressive loss only; segmentation batches add the
    segmentation loss. The decoder's class projection is re-initialized first because its
    conditions change from class vectors to LLM span embeddings.
    """
    sc = cfg.stage3
    if model is None:
        raise TrainingError("stage 3 needs the stage-2 model")
    names = [k for k, v in datasets.items() if len(v)]
    if not names:
        raise TrainingError("stage 3 needs at least one non-empty dataset")
    rng = _seed(sc)
    if reset_class_head:
        gen = torch.Generator().manual_seed(sc.seed)
        with torch.no_grad():
            model.decoder.reset_class_head(gen)
    model.train()
    set_trainable(model, 3)
    opt, sched = make_optimizer(model, 3, sc)
    result = StageResult(3, model, opt)
    specs = with_frequencies([DatasetSpec(k, len(datasets[k]), k) for k in names])
    epoch = 0
    while result.steps < sc.steps:
        for batch in build_epoch_index(specs, cfg.oversample_t, rng, sc.batch_size):
            if result.steps >= sc.steps:
                break
            src = names[batch[0][0]]
            samples = [datasets[src][i] for _, i in batch]
            out = model.forward_batch(samples, rng=rng, weights=cfg.loss)
            extra = {"ar": float(out.ar_loss.detach()), "source": src}
            if out.seg_loss is not None:
                extra["seg"] = float(out.seg_loss.detach())
            _step(model, opt, sched, out.loss, sc, result, extra)
            if hook:
                hook(result)
        epoch += 1
        if epoch_hook:
            model.eval()
            epoch_hook(result, epoch)
            model.train()
    return result


# ---------------------------------------------------------------------------
# checkpoints


def _state_digest(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        t = state[k].detach().cpu().contiguous()
        h.update(k.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: UnifiedSegModel, stage: int, cfg: RunConfig,
                    optimizer: torch.optim.Optimizer | None = None, rng: np.random.Generator | None = None,
                    losses: Sequence[dict] = (), keys: Sequence[str] | None = None) -> str:
    """Write a checkpoint; ``keys`` restricts the saved tensors to those top-level modules.

    Returns the content hash of the saved parameters.
    """
    state = {k: v.detach().clone() for k, v in model.state_dict().items()
             if keys is None or k.split(".", 1)[0] in keys}
    digest = _state_digest(state)
    payload = {
        "state": state,
        "stage": stage,
        "config_hash": cfg.model_hash(),
        "config_text": cfg.to_text(),
        "payload_hash": digest,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state if rng is not None else None,
        "losses": list(losses),
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    p.write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path, expect: RunConfig | ModelConfig | None = None) -> dict:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=False)
    except Exception as e:  # truncated or foreign file
        raise CheckpointError(f"{p}: unreadable checkpoint ({e.__class__.__name__}: {e})") from e
    if not isinstance(payload, dict) or "state" not in payload or "config_hash" not in payload:
        raise CheckpointError(f"{p}: not a checkpoint written by this package")
    digest = _state_digest(payload["state"])
    if digest != payload.get("payload_hash"):
        raise CheckpointError(f"{p}: parameter payload hash mismatch (stored {payload.get('payload_hash')}, "
                              f"computed {digest}); file is corrupt")
    if expect is not None:
        want = expect.model_hash() if isinstance(expect, RunConfig) else config_hash(expect)
        if want != payload["config_hash"]:
            raise CheckpointError(f"{p}: config hash mismatch (checkpoint {payload['config_hash']}, "
                                  f"expected {want})")
    return payload


def load_into(model: UnifiedSegModel, payload: dict) -> list[str]:
    """Copy checkpoint tensors into ``model``; returns (and warns about) keys left at init."""
    own = model.state_dict()
    unexpected = sorted(set(payload["state"]) - set(own))
    if unexpected:
        raise CheckpointError(f"checkpoint has keys the model lacks: {unexpected[:5]}")
    missing = sorted(set(own) - set(payload["state"]))
    model.load_state_dict(payload["state"], strict=False)
    if missing:
        groups = sorted({k.split(".", 1)[0] for k in missing})
        warnings.warn(f"checkpoint lacks {len(missing)} tensors in {groups}; kept at initialization",
                      stacklevel=2)
    return missing


def restore_rng(payload: dict) -> np.random.Generator | None:
    torch.set_rng_state(payload["torch_rng"])
    if payload.get("numpy_rng") is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["numpy_rng"]
    return rng


def checkpoint_keys(stage: int) -> tuple[str, ...] | None:
    """Stage 1 stores the segmentor alone; later stages store the full model."""
    return SEGMENTOR if stage == 1 else None
