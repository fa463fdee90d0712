"""Toy causal language model and the multimodal sequence plumbing around it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .layers import Block
from .prompt_format import DEFAULT_VOCAB, IMAGE, REGION, PromptSpan, TokenSequence, Vocabulary


class SequenceError(ValueError):
    pass


class ToyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.lm_width
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.tok_emb.weight, std=0.5)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_len, d) * 0.02) if cfg.lm_positional else None
        self.blocks = nn.ModuleList(Block(d, cfg.lm_heads, bias=cfg.bias) for _ in range(cfg.lm_blocks))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size, bias=False)
        nn.init.normal_(self.head.weight, std=0.02)

    def forward(self, emb: torch.Tensor, key_padding: torch.Tensor | None = None):
        """``emb`` (B, T, D) -> (hidden states (B, T, D), next-token logits (B, T, V)).

        Row ``i`` of the logits scores the token at ``i + 1``.
        """
        squeeze = emb.dim() == 2
        if squeeze:
            emb = emb[None]
        t = emb.shape[1]
        if t > self.cfg.max_len:
            raise SequenceError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        x = emb if self.pos_emb is None else emb + self.pos_emb[:t]
        for blk in self.blocks:
            # right padding only: the causal mask already hides pads from real positions
            x = blk(x, causal=True)
        h = self.norm(x)
        logits = self.head(h)
        if squeeze:
            return h[0], logits[0]
        return h, logits


@dataclass
class Assembled:
    """Multimodal embedding sequence plus, per original token, its ``[start, end)`` assembled range."""

    emb: torch.Tensor
    pos_map: list[tuple[int, int]]

    def last_index(self, token_index: int) -> int:
        return self.pos_map[token_index][1] - 1


def assemble_llm_input(seq: TokenSequence | Sequence[int], tok_emb: nn.Embedding,
                       h_v: torch.Tensor | None = None, h_s: torch.Tensor | None = None,
                       region_feats: Sequence[torch.Tensor] = (),
                       vocab: Vocabulary = DEFAULT_VOCAB) -> Assembled:
    """Replace ``<image>`` with ``[h_v ; h_s]`` and each ``<region>`` with its region feature."""
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    image_id, region_id = vocab.id(IMAGE), vocab.id(REGION)
    n_regions = sum(1 for t in ids if t == region_id)
    if n_regions != len(region_feats):
        raise SequenceError(f"{n_regions} <region> placeholders but {len(region_feats)} region features")
    token_vecs = tok_emb(torch.as_tensor(ids, dtype=torch.long))
    parts, pos_map = [], []
    cursor = 0
    r = 0
    for i, t in enumerate(ids):
        if t == image_id:
            vis = [v for v in (h_v, h_s) if v is not None]
            if not vis:
                raise SequenceError("<image> token without image features")
            block = torch.cat(vis, 0)
            parts.append(block)
            pos_map.append((cursor, cursor + block.shape[0]))
            cursor += block.shape[0]
            continue
        if t == region_id:
            parts.append(region_feats[r][None])
            r += 1
        else:
            parts.append(token_vecs[i:i + 1])
        pos_map.append((cursor, cursor + 1))
        cursor += 1
    emb = torch.cat(parts, 0) if parts else token_vecs
    return Assembled(emb, pos_map)


def token_logits(assembled: Assembled, logits: torch.Tensor) -> torch.Tensor:
    """Re-index assembled logits per original token: row i scores token i + 1."""
    idx = torch.as_tensor([assembled.last_index(i) for i in range(len(assembled.pos_map))])
    return logits[idx]


def autoregressive_loss(logits: torch.Tensor, targets, response_mask) -> torch.Tensor:
    """Mean next-token negative log-likelihood over the response positions.

    ``logits`` is token-aligned (row i scores token i + 1); ``response_mask[j]`` selects
    which target tokens ``j`` are scored. Accepts (L, V) or batched (B, L, V).
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    mask = torch.as_tensor(response_mask, dtype=torch.bool)
    if logits.dim() == 2:
        logits, targets, mask = logits[None], targets[None], mask[None]
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise SequenceError("logits, targets and mask disagree in shape")
    mask = mask[:, 1:]
    if not mask.any():
        raise SequenceError("response mask selects no positions")
    nll = F.cross_entropy(logits[:, :-1].transpose(1, 2), targets[:, 1:], reduction="none")
    return nll[mask].mean()


def gather_condition_embeddings(h: torch.Tensor, spans: Sequence[PromptSpan],
                                pos_map: Sequence[tuple[int, int]]) -> torch.Tensor:
    """One row per span: mean hidden state over the span's interior tokens."""
    rows = []
    for s in spans:
        if s.start < 0 or s.end > len(pos_map) or s.start >= s.end:
            raise SequenceError(f"span {s} outside sequence of {len(pos_map)} tokens")
        lo, hi = pos_map[s.start][0], pos_map[s.end - 1][1]
        if hi > h.shape[0]:
            raise SequenceError(f"span {s} maps past hidden states ({h.shape[0]})")
        rows.append(h[lo:hi].mean(0))
    if not rows:
        return h.new_zeros(0, h.shape[-1])
    return torch.stack(rows)


def gather_seg_embeddings(h: torch.Tensor, seg_positions: Sequence[int],
                          pos_map: Sequence[tuple[int, int]] | None = None) -> torch.Tensor:
    idx = [pos_map[p][0] if pos_map is not None else p for p in seg_positions]
    if not idx:
        return h.new_zeros(0, h.shape[-1])
    return h[torch.as_tensor(idx, dtype=torch.long)]
