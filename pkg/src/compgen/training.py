"""Teacher-forced training with Adam and the warmup / inverse-sqrt schedule."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from compgen import tensor as T
from compgen.data import BOS_ID, EOS_ID, NO_PARENT, PAD_ID, Dataset, Example, Vocabulary
from compgen.model import Transformer, parent_class, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    warmup: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def noam_lr(step: int, d: int, warmup: int, scale: float = 1.0) -> float:
    """d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("learning-rate schedule starts at step 1")
    return scale * d**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, torch.Tensor], lr: float) -> None:
    """Bias-corrected Adam update, in place; reads ``.grad`` of every param.

    Raises ``NonFiniteError`` naming the first parameter with a NaN/Inf grad.
    """
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise T.NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / c1)


# ---------------------------------------------------------------------------
# batches


def pad_rows(rows: Sequence[Sequence[int]], fill: int = PAD_ID) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), fill, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


@dataclass
class Batch:
    src: torch.Tensor
    tgt_in: torch.Tensor | None = None
    tgt_out: torch.Tensor | None = None
    tags: list[torch.Tensor] | None = None

    @property
    def src_keep(self) -> torch.Tensor:
        return self.src != PAD_ID

    @property
    def tgt_keep(self) -> torch.Tensor:
        return self.tgt_out != PAD_ID


def seq2seq_batch(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    src = [vocab.encode(ex.src) for ex in examples]
    tgt = [vocab.encode(ex.tgt) for ex in examples]
    return Batch(
        src=pad_rows(src),
        tgt_in=pad_rows([[BOS_ID] + t for t in tgt]),
        tgt_out=pad_rows([t + [EOS_ID] for t in tgt]),
    )


def tagging_batch(examples, vocab, tag_vocabs, cfg) -> Batch:
    src = pad_rows([vocab.encode(ex.src) for ex in examples])
    parents = []
    for ex in examples:
        parents.append([parent_class(cfg, i, int(p)) for i, p in enumerate(ex.tags[0])])
    # padded cells carry id 0 and are masked out by src_keep
    tags = [pad_rows(parents)]
    for k, tv in enumerate(tag_vocabs):
        tags.append(pad_rows([tv.encode(ex.tags[k + 1]) for ex in examples]))
    return Batch(src=src, tags=tags)


def make_batch(model: Transformer, examples, vocab, tag_vocabs=None) -> Batch:
    if model.cfg.mode == "tagging":
        return tagging_batch(examples, vocab, tag_vocabs, model.cfg)
    return seq2seq_batch(examples, vocab)


def batch_loss(model: Transformer, batch: Batch) -> torch.Tensor:
    if model.cfg.mode == "tagging":
        keep = batch.src_keep
        heads = model.forward_tagging(batch.src, keep)
        return sum(T.cross_entropy(logits, tgt, keep) for logits, tgt in zip(heads, batch.tags))
    scores, from_probs = model(batch.src, batch.tgt_in)
    return T.cross_entropy(scores, batch.tgt_out, batch.tgt_keep, from_probs=from_probs)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    lrs: list[float]


def check_lengths(model: Transformer, examples: Sequence[Example]) -> None:
    limit = model.cfg.max_len
    for n, ex in enumerate(examples):
        if len(ex.src) > limit or len(ex.tgt) + 1 > limit:
            raise ValueError(
                f"example {n} is longer than max_len={limit} "
                f"(src {len(ex.src)}, tgt {len(ex.tgt) + 1})"
            )


def train(
    model: Transformer,
    data: Dataset,
    cfg: TrainConfig,
    seed: int = 0,
    log_path=None,
    checkpoint_dir=None,
) -> TrainResult:
    """Train ``model`` on ``data.train`` for ``cfg.epochs`` epochs."""
    examples = list(data.train)
    if not examples:
        raise ValueError("training set is empty")
    check_lengths(model, examples)
    if model.cfg.mode == "tagging" and data.tag_vocabs is None:
        raise ValueError("tagging model needs a tagging dataset")
    rng = random.Random(seed)
    params = dict(model.named_parameters())
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.eps)
    losses, lrs = [], []
    log_fh = open(log_path, "w") if log_path else None
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = list(range(len(examples)))
            rng.shuffle(order)
            for start in range(0, len(order), cfg.batch_size):
                chunk = [examples[i] for i in order[start : start + cfg.batch_size]]
                batch = make_batch(model, chunk, data.vocab, data.tag_vocabs)
                for p in params.values():
                    p.grad = None
                loss = batch_loss(model, batch)
                T.check_finite(loss.detach(), "loss")
                loss.backward()
                lr = noam_lr(state.step + 1, model.cfg.d_model, cfg.warmup, cfg.lr_scale)
                adam_step(state, params, lr)
                losses.append(loss.item())
                lrs.append(lr)
                if log_fh:
                    log_fh.write(f"{state.step}\t{lr:.6g}\t{losses[-1]:.6f}\n")
                if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"step-{state.step}.pt", model,
                                    data.vocab, data.tag_vocabs)
            log.info("epoch %d: mean loss %.4f", epoch + 1,
                     sum(losses[-math.ceil(len(order) / cfg.batch_size):]) /
                     math.ceil(len(order) / cfg.batch_size))
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(state.step, losses, lrs)
