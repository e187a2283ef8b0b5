"""Differentiable primitives and initializers.

All arrays are ``torch.Tensor`` objects; autograd provides the reverse-mode
tape. The helpers here add the shape checks, masking rules and numerical
guards the models rely on, plus a central finite-difference checker used by
the test suite as an independent gradient oracle.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

PROB_FLOOR = 1e-9
LAYER_NORM_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product with an explicit shape error."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul dimension mismatch: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Max-stabilized softmax; ``mask`` is True where a position is *kept*.

    Masked entries get probability exactly 0. A row with nothing kept is an
    error rather than a silent NaN.
    """
    if x.shape[dim] < 1:
        raise ValueError("softmax over an empty axis")
    if mask is None:
        return torch.softmax(x, dim=dim)
    mask = mask.expand_as(x) if mask.shape != x.shape else mask
    if not mask.any(dim=dim).all():
        raise ValueError("softmax row with every position masked")
    return torch.softmax(x.masked_fill(~mask, float("-inf")), dim=dim)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS
) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def cross_entropy(
    scores: torch.Tensor,
    targets: torch.Tensor,
    keep: torch.Tensor | None = None,
    from_probs: bool = False,
) -> torch.Tensor:
    """Mean negative log-likelihood over the positions where ``keep`` is True.

    ``scores`` is ``[..., V]`` logits, or probabilities when ``from_probs``.
    Probabilities are floored at 1e-9 before the log.
    """
    vocab = scores.shape[-1]
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of range [0, {vocab})")
    if keep is None:
        keep = torch.ones(targets.shape, dtype=torch.bool)
    keep = torch.as_tensor(keep, dtype=torch.bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy over zero unpadded positions")
    if from_probs:
        sums = scores.detach().sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
            raise ValueError("probability rows do not sum to 1")
        logp = torch.log(scores.clamp_min(PROB_FLOOR))
    else:
        logp = torch.log_softmax(scores, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked * keep.to(picked.dtype)).sum() / count


def init_embedding(rows: int, cols: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform in [-0.05, 0.05] (Keras ``uniform`` embedding default)."""
    if rows < 1 or cols < 1:
        raise ValueError("embedding extents must be positive")
    return torch.empty(rows, cols).uniform_(-0.05, 0.05, generator=generator)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_dense(fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    """Glorot-uniform ``[fan_in, fan_out]`` kernel.

    The bound sqrt(6 / (fan_in + fan_out)) gives standard deviation
    sqrt(2 / (fan_in + fan_out)).
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("dense extents must be positive")
    a = glorot_bound(fan_in, fan_out)
    return torch.empty(fan_in, fan_out).uniform_(-a, a, generator=generator)


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def numeric_grad(
    fn: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-4
) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` with respect to ``param``.

    ``param`` is perturbed in place and restored; run in float64.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(fn())
            flat[i] = orig - h
            minus = float(fn())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Max-norm relative error, scaled by the larger of the two gradients."""
    diff = (analytic - numeric).abs().max().item()
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return diff / scale


def gradient_check(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-4
) -> float:
    """Worst relative error between autograd and finite differences."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone()
        worst = max(worst, relative_error(analytic, numeric_grad(fn, p, h)))
    return worst
