"""Central finite-difference verification of autograd gradients.

The checked closure must be deterministic: any sampling inside it has to
be re-seeded per call.  Checks run at double precision with a small step;
relative error is measured against a floor so exactly-zero gradients on
both sides compare as equal.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DEFAULT_EPS = 1e-6
DEFAULT_FLOOR = 1e-6


def central_difference_grads(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = DEFAULT_EPS
) -> list[torch.Tensor]:
    """d fn / d p for each parameter tensor via (f(p+e) - f(p-e)) / 2e per coordinate."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(fn())
                flat[i] = orig - eps
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            grads.append(g)
    return grads


def autograd_grads(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]


def max_relative_error(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = DEFAULT_EPS,
    floor: float = DEFAULT_FLOOR,
) -> float:
    """Worst per-coordinate relative error between autograd and central differences."""
    an = autograd_grads(fn, params)
    fd = central_difference_grads(fn, params, eps=eps)
    worst = 0.0
    for a, f in zip(an, fd):
        denom = torch.maximum(torch.maximum(a.abs(), f.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - f).abs() / denom).max().item()))
    return worst
