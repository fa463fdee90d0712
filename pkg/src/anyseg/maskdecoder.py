"""Query-based mask decoder, Hungarian matching, segmentation losses and inference post-processing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .config import LossConfig, ModelConfig
from .layers import MLP, Attention, sine_pos_2d


class DecoderError(ValueError):
    pass


@dataclass
class MaskPrediction:
    """Decoder output for a batch.

    ``masks``: (B, Q, h, w) logits at the finest feature scale. ``class_logits``:
    (B, Q, S_max + 1); column ``S_max`` is the background embedding, padded condition
    columns hold ``-inf``. ``query_valid``: (B, Q) marks real (non-padding) queries.
    """

    masks: torch.Tensor
    class_logits: torch.Tensor
    query_valid: torch.Tensor
    n_conditions: list[int]

    def sample(self, i: int) -> "SamplePrediction":
        valid = self.query_valid[i]
        s = self.n_conditions[i]
        s_max = self.class_logits.shape[-1] - 1
        cols = list(range(s)) + [s_max]
        return SamplePrediction(self.masks[i][valid], self.class_logits[i][valid][:, cols])


@dataclass
class SamplePrediction:
    """One image: ``masks`` (Q, h, w) logits, ``class_logits`` (Q, S + 1), background last."""

    masks: torch.Tensor
    class_logits: torch.Tensor

    @property
    def n_conditions(self) -> int:
        return self.class_logits.shape[1] - 1


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm_c = nn.LayerNorm(d)
        self.cross = Attention(d, heads)
        self.norm_s = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.norm_f = nn.LayerNorm(d)
        self.ffn = MLP(d, 4 * d, d)

    def forward(self, q, qpos, mem, mpos, q_pad):
        q = q + self.cross(self.norm_c(q), mem, query_pos=qpos, key_pos=mpos)
        q = q + self.self_attn(self.norm_s(q), key_padding=q_pad, query_pos=qpos, key_pos=qpos)
        return q + self.ffn(self.norm_f(q))


class MaskDecoder(nn.Module):
    """N learned queries plus one query per ``<SEG>`` embedding, refined coarse-to-fine over the
    connector maps; masks are query-embedding x finest-map dot products and class logits are dot
    products against ``[conditions ; background]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, D = cfg.dec_width, cfg.lm_width
        self.cfg = cfg
        self.query_feat = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.5)
        self.query_pos = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.5)
        self.seg_in = nn.Linear(D, d)
        self.seg_pos = nn.Parameter(torch.zeros(d))
        self.level_embed = nn.Parameter(torch.zeros(3, d))
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.dec_heads) for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(d)
        self.class_embed = nn.Linear(d, D)
        self.mask_embed = MLP(d, d, d)
        self.background = nn.Parameter(torch.randn(D) * 0.1)

    @torch.no_grad()
    def reset_class_head(self, generator: torch.Generator | None = None):
        bound = 1.0 / self.class_embed.in_features ** 0.5
        self.class_embed.weight.uniform_(-bound, bound, generator=generator)
        self.class_embed.bias.uniform_(-bound, bound, generator=generator)

    @torch.no_grad()
    def zero_heads(self):
        for p in (*self.class_embed.parameters(), *self.mask_embed.parameters()):
            p.zero_()

    def forward(self, feats: dict[str, torch.Tensor], cond: Sequence[torch.Tensor] | torch.Tensor,
                seg_embs: Sequence[torch.Tensor] | torch.Tensor) -> MaskPrediction:
        """``cond`` / ``seg_embs``: per-sample (S_i, D) tensors, or one (B, S, D) tensor."""
        levels = [s for s in ("1/32", "1/16", "1/8") if s in feats]
        if not levels:
            raise DecoderError("no feature maps given")
        d = self.cfg.dec_width
        for s in levels:
            if feats[s].shape[1] != d:
                raise DecoderError(f"feature map {s} has width {feats[s].shape[1]}, decoder expects {d}")
        mask_feat = feats[levels[-1]]
        b = mask_feat.shape[0]
        cond = list(cond) if not torch.is_tensor(cond) else list(cond.unbind(0))
        seg_embs = list(seg_embs) if not torch.is_tensor(seg_embs) else list(seg_embs.unbind(0))
        if len(cond) != b or len(seg_embs) != b:
            raise DecoderError(f"batch of {b} images but {len(cond)} condition sets / {len(seg_embs)} SEG sets")
        n_cond = [c.shape[0] for c in cond]
        n_seg = [e.shape[0] for e in seg_embs]
        s_max, g_max = max(n_cond), max(n_seg)
        dtype = mask_feat.dtype
        D = self.cfg.lm_width

        cond_pad = mask_feat.new_zeros(b, s_max, D)
        cond_valid = torch.zeros(b, s_max, dtype=torch.bool)
        seg_pad = mask_feat.new_zeros(b, g_max, D)
        seg_valid = torch.zeros(b, g_max, dtype=torch.bool)
        for i in range(b):
            cond_pad[i, :n_cond[i]] = cond[i]
            cond_valid[i, :n_cond[i]] = True
            seg_pad[i, :n_seg[i]] = seg_embs[i]
            seg_valid[i, :n_seg[i]] = True

        n = self.cfg.n_queries
        q = torch.cat([self.query_feat.expand(b, n, d), self.seg_in(seg_pad)], 1)
        qpos = torch.cat([self.query_pos.expand(b, n, d), self.seg_pos.expand(b, g_max, d)], 1)
        q_valid = torch.cat([torch.ones(b, n, dtype=torch.bool), seg_valid], 1)

        mems = []
        for k, s in enumerate(levels):
            f = feats[s]
            h, w = f.shape[-2:]
            mems.append((f.flatten(2).transpose(1, 2) + self.level_embed[k],
                         sine_pos_2d(h, w, d, dtype=dtype)[None]))
        for j, layer in enumerate(self.layers):
            mem, mpos = mems[j % len(mems)]
            q = layer(q, qpos, mem, mpos, ~q_valid)
        q = self.norm(q)

        masks = torch.einsum("bqc,bchw->bqhw", self.mask_embed(q), mask_feat)
        if self.cfg.mask_pool_class:
            # add the pixel features pooled under each query's own soft mask
            weights = masks.sigmoid().flatten(2)
            pooled = torch.einsum("bqp,bcp->bqc", weights, mask_feat.flatten(2))
            q = q + pooled / (weights.sum(-1, keepdim=True) + 1.0)
        classes = torch.cat([cond_pad, self.background.expand(b, 1, D)], 1)
        logits = torch.einsum("bqd,bsd->bqs", self.class_embed(q), classes)
        pad_cols = torch.cat([~cond_valid, torch.zeros(b, 1, dtype=torch.bool)], 1)
        logits = logits.masked_fill(pad_cols[:, None, :], float("-inf"))
        return MaskPrediction(masks, logits, q_valid, n_cond)


# ---------------------------------------------------------------------------
# matching and losses


def upsample_masks(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """(Q, h, w) -> (Q, H, W) bilinear."""
    if tuple(mask_logits.shape[-2:]) == tuple(size):
        return mask_logits
    return F.interpolate(mask_logits[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    if logits.shape != gt.shape:
        raise DecoderError(f"shape mismatch {tuple(logits.shape)} vs {tuple(gt.shape)}")
    p = logits.sigmoid().flatten()
    g = gt.flatten().to(p.dtype)
    return 1 - (2 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps)


def bce_mask_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if logits.shape != gt.shape:
        raise DecoderError(f"shape mismatch {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def _pairwise_bce(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # x: (Q, P) logits, g: (G, P) targets -> (Q, G) mean BCE
    pos = F.softplus(-x)
    neg = F.softplus(x)
    return (pos @ g.T + neg @ (1 - g).T) / x.shape[1]


def _pairwise_dice(x: torch.Tensor, g: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    p = x.sigmoid()
    num = 2 * p @ g.T + eps
    den = p.sum(1)[:, None] + g.sum(1)[None, :] + eps
    return 1 - num / den


def matching_cost(pred: SamplePrediction, gt_masks: torch.Tensor, gt_labels: Sequence[int],
                  weights: LossConfig | None = None, upsampled: torch.Tensor | None = None) -> torch.Tensor:
    """(Q, G) cost: -p(label) + mask BCE + dice, all on full-resolution masks."""
    w = weights or LossConfig()
    q = pred.masks.shape[0]
    if len(gt_labels) == 0:
        return pred.masks.new_zeros(q, 0)
    size = tuple(gt_masks.shape[-2:])
    x = (upsampled if upsampled is not None else upsample_masks(pred.masks, size)).flatten(1)
    g = gt_masks.flatten(1).to(x.dtype)
    prob = pred.class_logits.softmax(-1)[:, list(gt_labels)]
    return -w.cls_weight * prob + w.mask_weight * _pairwise_bce(x, g) + w.dice_weight * _pairwise_dice(x, g)


def _solve(cost: np.ndarray) -> tuple[float, np.ndarray]:
    # cost: (G, Q); returns total and query per gt
    rows, cols = linear_sum_assignment(cost)
    assign = np.empty(cost.shape[0], dtype=int)
    assign[rows] = cols
    return float(cost[rows, cols].sum()), assign


def hungarian_match(cost) -> list[int]:
    """Minimum-cost injective map ground truth -> query; ``result[g]`` is g's query.

    Among equal-cost optima the lexicographically smallest ``(query of gt 0, gt 1, ...)``
    is returned.
    """
    c = np.asarray(cost.detach().cpu() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise DecoderError("cost must be a (queries, gts) matrix")
    n_q, n_g = c.shape
    if n_g > n_q:
        raise DecoderError(f"{n_g} ground-truth regions but only {n_q} queries")
    if n_g == 0:
        return []
    ct = c.T.copy()
    best, assign = _solve(ct)
    tol = 1e-12 * max(1.0, abs(best))
    fixed: list[int] = []
    used: set[int] = set()
    for g in range(n_g):
        for q in range(n_q):
            if q in used:
                continue
            if q == assign[g]:
                break
            # force g -> q and re-solve the remaining gts over the remaining queries
            rest_g = list(range(g + 1, n_g))
            rest_q = [k for k in range(n_q) if k not in used and k != q]
            head = sum(ct[gg, fixed[gg]] for gg in range(g)) + ct[g, q]
            if rest_g:
                sub_total, sub = _solve(ct[np.ix_(rest_g, rest_q)])
                total = head + sub_total
            else:
                total = head
            if total <= best + tol:
                for k, gg in enumerate(rest_g):
                    assign[gg] = rest_q[sub[k]]
                assign[g] = q
                break
        fixed.append(int(assign[g]))
        used.add(int(assign[g]))
    return fixed


@dataclass
class SegLoss:
    total: torch.Tensor
    cls: torch.Tensor
    mask: torch.Tensor
    dice: torch.Tensor

    def breakdown(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("total", "cls", "mask", "dice")}


def segmentation_loss(pred: SamplePrediction, gt_masks: torch.Tensor, gt_labels: Sequence[int],
                      assignment: Sequence[int], weights: LossConfig | None = None,
                      upsampled: torch.Tensor | None = None) -> SegLoss:
    """Classification CE over every query (unassigned -> background) plus mask BCE and dice
    averaged over assigned pairs."""
    w = weights or LossConfig()
    q, s1 = pred.class_logits.shape
    target = torch.full((q,), s1 - 1, dtype=torch.long)
    for g, qi in enumerate(assignment):
        target[qi] = int(gt_labels[g])
    class_w = pred.class_logits.new_ones(s1)
    class_w[-1] = w.bg_weight
    l_cls = F.cross_entropy(pred.class_logits, target, weight=class_w)
    if len(assignment):
        size = tuple(gt_masks.shape[-2:])
        idx = torch.as_tensor(list(assignment), dtype=torch.long)
        x = upsampled[idx] if upsampled is not None else upsample_masks(pred.masks[idx], size)
        g = gt_masks.to(x.dtype)
        l_mask = F.binary_cross_entropy_with_logits(x, g, reduction="none").flatten(1).mean(1).mean()
        p = x.sigmoid().flatten(1)
        gf = g.flatten(1)
        l_dice = (1 - (2 * (p * gf).sum(1) + 1) / (p.sum(1) + gf.sum(1) + 1)).mean()
    else:
        l_mask = l_dice = pred.class_logits.new_zeros(())
    total = w.cls_weight * l_cls + w.mask_weight * l_mask + w.dice_weight * l_dice
    return SegLoss(total, l_cls, l_mask, l_dice)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Instance:
    label: int
    mask: np.ndarray
    confidence: float
    query: int = -1


def predict_instances(pred: SamplePrediction, image_size: tuple[int, int], threshold: float = 0.5) -> list[Instance]:
    with torch.no_grad():
        prob = pred.class_logits.softmax(-1)
        conf, label = prob.max(-1)
        masks = upsample_masks(pred.masks, image_size).sigmoid() > threshold
    bg = pred.class_logits.shape[1] - 1
    out = []
    for qi in range(prob.shape[0]):
        if int(label[qi]) == bg:
            continue
        m = masks[qi].cpu().numpy()
        if not m.any():
            continue
        out.append(Instance(int(label[qi]), m, float(conf[qi]), qi))
    return out


def panoptic_merge(instances: Sequence[Instance], image_size: tuple[int, int]):
    """Resolve overlaps by confidence. Returns (segment-id map with -1 background, kept instances);
    segment ids index the returned list."""
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].confidence, i))
    owner = np.full(image_size, -1, dtype=np.int64)
    for i in order:
        free = instances[i].mask & (owner < 0)
        owner[free] = i
    kept, seg_map = [], np.full(image_size, -1, dtype=np.int64)
    for i in sorted(set(owner[owner >= 0].tolist()), key=lambda i: (-instances[i].confidence, i)):
        seg_map[owner == i] = len(kept)
        inst = instances[i]
        kept.append(Instance(inst.label, owner == i, inst.confidence, inst.query))
    return seg_map, kept
