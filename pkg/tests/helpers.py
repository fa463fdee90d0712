"""Shared small configs and numeric helpers for the test suite."""
from __future__ import annotations

from dataclasses import replace

import torch

from anyseg.config import ModelConfig


def tiny_cfg(**kw) -> ModelConfig:
    base = ModelConfig(image_size=32, patch=8, image_width=16, image_blocks=1, image_heads=2,
                       seg_width=16, seg_blocks=1, seg_heads=2, dec_width=16, dec_heads=2, dec_layers=2,
                       n_queries=4, lm_width=16, lm_blocks=1, lm_heads=2, max_len=128, region_points=4)
    return replace(base, **kw)


def fd_check(f, params, n_probe: int, gen: torch.Generator, eps: float = 1e-6):
    """Max relative error between autograd and central differences at ``n_probe`` random
    scalar entries drawn across ``params``."""
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_probe):
            k = int(torch.multinomial(sizes, 1, generator=gen))
            j = int(torch.randint(params[k].numel(), (1,), generator=gen))
            flat = params[k].view(-1)
            old = flat[j].item()
            flat[j] = old + eps
            up = f().item()
            flat[j] = old - eps
            down = f().item()
            flat[j] = old
            num = (up - down) / (2 * eps)
            ana = 0.0 if grads[k] is None else grads[k].reshape(-1)[j].item()
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst


ACCEPTANCE: list[str] = []


def criterion(name: str, ok: bool, detail: str = "") -> bool:
    """Record one acceptance verdict; the session summary prints every recorded line."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok
