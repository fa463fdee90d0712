"""The unified model: dual encoders and projectors, connector, toy LLM and mask decoder wired together."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import backbone
from .config import LossConfig, ModelConfig
from .datagen import SegSample
from .langmodel import (
    ToyLM, assemble_llm_input, autoregressive_loss, gather_condition_embeddings,
    gather_seg_embeddings, token_logits,
)
from .maskdecoder import (
    MaskDecoder, MaskPrediction, hungarian_match, matching_cost, segmentation_loss, upsample_masks,
)
from .prompt_format import (
    BOS, DEFAULT_VOCAB, EOS, IMAGE, PAD, REGION, SEG_TASKS, TokenSequence, Vocabulary,
    condition_spans, locate_seg_positions,
)

# parameter groups by top-level module name
DUAL_ENCODERS = ("image_encoder", "seg_encoder")
PROJECTORS = ("image_projector", "seg_projector", "region_projector")
SEGMENTOR = ("seg_encoder", "connector", "decoder", "class_vectors")
LLM = ("llm",)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


@dataclass
class ForwardOutput:
    loss: torch.Tensor
    ar_loss: torch.Tensor | None = None
    seg_loss: torch.Tensor | None = None
    terms: dict = field(default_factory=dict)
    pred: MaskPrediction | None = None
    per_sample: list = field(default_factory=list)


class UnifiedSegModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary = DEFAULT_VOCAB):
        super().__init__()
        if cfg.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.image_encoder = backbone.ImageEncoder(cfg)
        self.seg_encoder = backbone.SegEncoder(cfg)
        self.connector = backbone.SegConnector(cfg)
        self.image_projector = backbone.ImageProjector(cfg)
        self.seg_projector = backbone.SegProjector(cfg)
        self.region_projector = backbone.RegionProjector(cfg)
        self.llm = ToyLM(cfg)
        self.decoder = MaskDecoder(cfg)
        # stage-1 stand-in for LLM condition embeddings: one learned vector per category
        self.class_vectors = nn.Parameter(torch.randn(cfg.num_categories, cfg.lm_width) * 0.5)

    # -- parameter groups -------------------------------------------------

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def named_group_parameters(self, groups: Sequence[str]):
        return [(n, p) for n, p in self.named_parameters() if self.group_of(n) in groups]

    # -- segmentor-only path (stage 1) -------------------------------------

    def segment_features(self, x: torch.Tensor):
        z_s = self.seg_encoder(x)
        return z_s, self.connector(z_s)

    def segmentor_forward(self, x: torch.Tensor) -> MaskPrediction:
        _, feats = self.segment_features(x)
        b = x.shape[0]
        cv = self.class_vectors
        return self.decoder(feats, [cv] * b, [cv] * b)

    def segmentor_loss(self, x, targets, weights: LossConfig | None = None) -> ForwardOutput:
        """``targets``: per image a list of (category_id, mask) pairs."""
        pred = self.segmentor_forward(x)
        size = tuple(x.shape[-2:])
        losses, terms = [], []
        for i, regions in enumerate(targets):
            sp = pred.sample(i)
            gm, gl = _gt_tensors(regions, size, x.dtype)
            up = upsample_masks(sp.masks, size)
            with torch.no_grad():
                # a diverged forward still gets an assignment; the NaN loss is caught by the trainer
                cost = torch.nan_to_num(matching_cost(sp, gm, gl, weights, up.detach()), nan=0.0)
                assign = hungarian_match(cost)
            sl = segmentation_loss(sp, gm, gl, assign, weights, up)
            losses.append(sl.total)
            terms.append(sl)
        loss = torch.stack(losses).mean()
        return ForwardOutput(loss, seg_loss=loss, terms=_mean_terms(terms), pred=pred)

    # -- multimodal path (stages 2 and 3, inference) ------------------------

    def encode(self, x: torch.Tensor):
        z_v = self.image_encoder(x)
        z_s, feats = self.segment_features(x)
        return z_v, z_s, feats, self.image_projector(z_v), self.seg_projector(z_s)

    def region_features(self, z_s_i, sample: SegSample, rng) -> list[torch.Tensor]:
        if not sample.prompts:
            return []
        return [
            backbone.sample_region_feature(z_s_i, p.rendering, self.region_projector, rng, self.cfg.region_points)
            for p in sample.prompts
        ]

    def run_llm(self, seqs: Sequence[TokenSequence], h_v, h_s, region_feats):
        assembled = [
            assemble_llm_input(s, self.llm.tok_emb, h_v[i], h_s[i], region_feats[i], self.vocab)
            for i, s in enumerate(seqs)
        ]
        t_max = max(a.emb.shape[0] for a in assembled)
        d = self.cfg.lm_width
        emb = h_v.new_zeros(len(seqs), t_max, d)
        for i, a in enumerate(assembled):
            emb[i, :a.emb.shape[0]] = a.emb
        hidden, logits = self.llm(emb)
        return assembled, hidden, logits

    def forward_batch(self, samples: Sequence[SegSample], rng=None, weights: LossConfig | None = None,
                      seqs: Sequence[TokenSequence] | None = None) -> ForwardOutput:
        """Teacher-forced multimodal forward; loss is the auto-regressive term plus, for
        segmentation samples, the segmentation term (per-sample sum, batch mean)."""
        x = images_to_tensor([s.image for s in samples], self.class_vectors.dtype)
        seqs = list(seqs) if seqs is not None else [s.tokens for s in samples]
        z_v, z_s, feats, h_v, h_s = self.encode(x)
        region_feats = [self.region_features(z_s[i], s, rng) for i, s in enumerate(samples)]
        assembled, hidden, logits = self.run_llm(seqs, h_v, h_s, region_feats)

        ar = []
        conds, segs, seg_idx = [], [], []
        for i, (s, seq, a) in enumerate(zip(samples, seqs, assembled)):
            tl = token_logits(a, logits[i])
            ar.append(autoregressive_loss(tl, seq.ids, seq.response_mask()))
            if s.task in SEG_TASKS:
                spans = condition_spans(seq, self.vocab)
                seg_pos = locate_seg_positions(seq, self.vocab)
                if len(spans) != len(seg_pos):
                    raise ValueError(f"{len(spans)} condition spans but {len(seg_pos)} <SEG> tokens")
                h = hidden[i]
                conds.append(gather_condition_embeddings(h, spans, a.pos_map))
                segs.append(gather_seg_embeddings(h, seg_pos, a.pos_map))
                seg_idx.append(i)
        ar_per = torch.stack(ar)
        seg_list = [ar_per.new_zeros(()) for _ in samples]
        pred = None
        terms = []
        if seg_idx:
            sub = {k: v[seg_idx] for k, v in feats.items()}
            pred = self.decoder(sub, conds, segs)
            size = tuple(x.shape[-2:])
            for j, i in enumerate(seg_idx):
                sp = pred.sample(j)
                gm, gl = _gt_tensors(list(zip(samples[i].labels, samples[i].masks)), size, x.dtype)
                up = upsample_masks(sp.masks, size)
                with torch.no_grad():
                    cost = torch.nan_to_num(matching_cost(sp, gm, gl, weights, up.detach()), nan=0.0)
                assign = hungarian_match(cost)
                sl = segmentation_loss(sp, gm, gl, assign, weights, up)
                seg_list[i] = sl.total
                terms.append(sl)
        seg_per = torch.stack(seg_list)
        loss = (ar_per + seg_per).mean()
        out = ForwardOutput(loss, ar_per.mean(), seg_per.mean() if seg_idx else None,
                            _mean_terms(terms) if terms else {}, pred)
        out.per_sample = [(float(a), float(s)) for a, s in zip(ar_per.detach(), seg_per.detach())]
        return out

    # -- inference ------------------------------------------------------

    @torch.no_grad()
    def greedy_decode(self, sample: SegSample, max_new: int = 48, rng=None) -> TokenSequence:
        x = images_to_tensor([sample.image], self.class_vectors.dtype)
        z_v, z_s, _, h_v, h_s = self.encode(x)
        regions = self.region_features(z_s[0], sample, rng)
        ids = list(sample.tokens.instruction)
        eos = self.vocab.id(EOS)
        # placeholders and framing tokens are never generated
        banned = [self.vocab.id(t) for t in (PAD, BOS, IMAGE, REGION)]
        for _ in range(max_new):
            a = assemble_llm_input(ids, self.llm.tok_emb, h_v[0], h_s[0], regions, self.vocab)
            _, logits = self.llm(a.emb)
            last = logits[-1].clone()
            last[banned] = float("-inf")
            nxt = int(last.argmax())
            ids.append(nxt)
            if nxt == eos or len(a.emb) + 1 >= self.cfg.max_len:
                break
        return TokenSequence(tuple(ids), sample.tokens.prompt_len, sample.task)

    @torch.no_grad()
    def predict(self, sample: SegSample, decode: bool = True, rng=None):
        """Response tokens and the decoder output for one sample.

        Uses the greedy response when its ``<SEG>`` count matches the condition spans;
        otherwise falls back to the template response (``fallback`` flag set).
        """
        seq = sample.tokens
        fallback = False
        if decode:
            gen = self.greedy_decode(sample, max_new=len(sample.tokens.response) + 8, rng=rng)
            try:
                n_spans = len(condition_spans(gen, self.vocab))
                ok = sample.task not in SEG_TASKS or n_spans == len(locate_seg_positions(gen, self.vocab)) > 0
            except ValueError:
                ok = False
            if ok and sample.task in SEG_TASKS and n_spans != len(condition_spans(seq, self.vocab)):
                ok = False
            if ok:
                seq = gen
            else:
                fallback = True
        out = self.forward_batch([sample], rng=rng, seqs=[seq])
        sp = out.pred.sample(0) if out.pred is not None else None
        return seq, sp, fallback


def _gt_tensors(regions, size, dtype):
    if not regions:
        return torch.zeros(0, *size, dtype=dtype), []
    labels = [int(c) for c, _ in regions]
    masks = torch.from_numpy(np.stack([np.asarray(m, dtype=bool) for _, m in regions])).to(dtype)
    return masks, labels


def _mean_terms(terms) -> dict[str, float]:
    if not terms:
        return {}
    keys = ("total", "cls", "mask", "dice")
    return {k: float(np.mean([float(getattr(t, k).detach()) for t in terms])) for k in keys}
