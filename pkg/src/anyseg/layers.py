"""Small transformer building blocks shared by the encoders, the language model and the decoder."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(kv_dim, dim, bias=bias)
        self.v = nn.Linear(kv_dim, dim, bias=bias)
        self.out = nn.Linear(dim, dim, bias=bias)

    def forward(self, x, context=None, *, causal=False, key_padding=None, key_pos=None, query_pos=None):
        """``key_padding``: (B, Tk) bool, True marks keys to ignore."""
        context = x if context is None else context
        b, tq, d = x.shape
        tk = context.shape[1]
        h = self.heads
        q_in = x if query_pos is None else x + query_pos
        k_in = context if key_pos is None else context + key_pos
        q = self.q(q_in).view(b, tq, h, d // h).transpose(1, 2)
        k = self.k(k_in).view(b, tk, h, d // h).transpose(1, 2)
        v = self.v(context).view(b, tk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            future = torch.ones(tq, tk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        attn = scores.softmax(-1)
        y = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out(y)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, bias=bias)
        self.fc2 = nn.Linear(d_hidden, d_out, bias=bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, bias: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, bias=bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, bias=bias)

    def forward(self, x, causal=False, key_padding=None):
        x = x + self.attn(self.norm1(x), causal=causal, key_padding=key_padding)
        return x + self.mlp(self.norm2(x))


def sine_pos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, shape (h*w, dim), row-major."""
    if dim % 4:
        raise ValueError("sine embedding width must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ey = torch.cat([torch.sin(ys[:, None] * freqs), torch.cos(ys[:, None] * freqs)], 1)
    ex = torch.cat([torch.sin(xs[:, None] * freqs), torch.cos(xs[:, None] * freqs)], 1)
    pos = torch.cat([ey[:, None, :].expand(h, w, -1), ex[None, :, :].expand(h, w, -1)], -1)
    return pos.reshape(h * w, dim).to(dtype)
