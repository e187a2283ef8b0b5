"""Encoder-decoder transformer with relative positions, copy decoding,
layer sharing and sequence-tagging heads."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import torch
from torch import nn

from compgen import tensor as T
from compgen.data import BOS_ID, PAD_ID, Vocabulary

ENCODINGS = ("abs", "rel-e", "rel-b", "rel-eb", "rel2-e", "rel2-b", "rel2-eb")
PARENT_HEADS = ("absolute", "relative", "attention")
SIZES = {"small": (64, 256, 4), "large": (128, 512, 8)}


@dataclass
class ModelConfig:
    encoding: str = "abs"
    copy_decoder: bool = False
    num_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    share_layers: bool = False
    radius: int = 16
    mode: str = "seq2seq"
    parent_head: str = "attention"
    max_len: int = 64
    # "step": w = sigmoid(g . y_i + b); "global": one learned scalar
    copy_gate: str = "step"
    # apply a vocabulary softmax on top of the copy attention's one-hot mixture
    copy_vocab_softmax: bool = False
    # sizes of the role / category / noun-determiner / verb-name label sets
    tag_sizes: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.num_layers < 1 or self.radius < 1:
            raise ValueError("num_layers and radius must be at least 1")
        if self.encoding == "abs" and self.d_model % 2:
            raise ValueError("sinusoidal encodings need an even d_model")
        if self.mode not in ("seq2seq", "tagging"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.parent_head not in PARENT_HEADS:
            raise ValueError(f"unknown parent head {self.parent_head!r}")
        if self.copy_gate not in ("step", "global"):
            raise ValueError(f"unknown copy gate {self.copy_gate!r}")
        self.tag_sizes = tuple(self.tag_sizes)

    @property
    def relative(self) -> bool:
        return self.encoding != "abs"

    @property
    def rel_embeddings(self) -> bool:
        return self.relative and "e" in self.encoding.split("-")[1]

    @property
    def rel_biases(self) -> bool:
        return self.relative and "b" in self.encoding.split("-")[1]

    @property
    def cross_relative(self) -> bool:
        return self.encoding.startswith("rel2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def name(self) -> str:
        size = {v: k for k, v in SIZES.items()}.get((self.d_model, self.d_ff, self.heads))
        base = self.encoding + ("-c" if self.copy_decoder else "")
        if size is None:
            return f"{base}-d{self.d_model}f{self.d_ff}h{self.heads}l{self.num_layers}" + (
                "s" if self.share_layers else "")
        return f"{base}-{size}-{self.num_layers}" + ("s" if self.share_layers else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tag_sizes"] = list(self.tag_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def preset(name: str, **overrides) -> ModelConfig:
    """Resolve ``small-2``, ``large-4s``, ``rel2-eb-c`` style names.

    Size presets default to rel2-eb with a copy decoder; encoding names
    default to small-2 dimensions. Keyword overrides win.
    """
    name = name.strip()
    kwargs: dict = {}
    head, _, tail = name.partition("-")
    if head in SIZES and tail:
        shared = tail.endswith("s")
        layers = int(tail[:-1] if shared else tail)
        d, f, h = SIZES[head]
        kwargs = dict(encoding="rel2-eb", copy_decoder=True, num_layers=layers,
                      d_model=d, d_ff=f, heads=h, share_layers=shared)
    else:
        copy = name.endswith("-c")
        enc = name[:-2] if copy else name
        if enc not in ENCODINGS:
            raise ValueError(f"unknown preset {name!r}")
        kwargs = dict(encoding=enc, copy_decoder=copy)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# positions


def sinusoidal_encoding(position: int, d: int) -> torch.Tensor:
    """Interleaved sin/cos: slot 2i = sin(pos / 10000^(2i/d)), slot 2i+1 = cos."""
    if position < 0 or d % 2:
        raise ValueError("need position >= 0 and even d")
    return sinusoid_table(position + 1, d)[position]


@lru_cache(maxsize=32)
def _sinusoid(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


def sinusoid_table(length: int, d: int) -> torch.Tensor:
    return _sinusoid(length, d)


def relative_label(i: int, j: int, radius: int) -> int:
    """Index of label l_{clamp(j - i)} in a table of 2 * radius + 1 rows."""
    return max(-radius, min(radius, j - i)) + radius


@lru_cache(maxsize=256)
def relative_labels(q_len: int, k_len: int, radius: int) -> torch.Tensor:
    offsets = torch.arange(k_len)[None, :] - torch.arange(q_len)[:, None]
    return offsets.clamp(-radius, radius) + radius


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    keep: torch.Tensor | None,
    labels: torch.Tensor | None = None,
    rel_embeddings: torch.Tensor | None = None,
    rel_biases: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over ``[B, h, L, dh]`` tensors.

    logit(i, j) = q_i . (k_j + E[label(i, j)]) / sqrt(dh) + B[label(i, j), head]

    ``rel_embeddings`` is ``[2r+1, dh]`` (shared by the heads) and
    ``rel_biases`` is ``[2r+1, h]``. Returns the output and the weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    weights = T.softmax(attention_logits(q, k, labels, rel_embeddings, rel_biases), keep)
    return T.matmul(weights, v), weights


def attention_logits(q, k, labels=None, rel_embeddings=None, rel_biases=None) -> torch.Tensor:
    logits = T.matmul(q, k.transpose(-1, -2))
    if rel_embeddings is not None:
        per_label = T.matmul(q, rel_embeddings.t())  # [B, h, Lq, 2r+1]
        index = labels.expand(*per_label.shape[:-1], labels.shape[-1])
        logits = logits + per_label.gather(-1, index)
    logits = logits / math.sqrt(q.shape[-1])
    if rel_biases is not None:
        logits = logits + rel_biases[labels].permute(2, 0, 1)
    return logits


# ---------------------------------------------------------------------------
# layers


class Dense(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(T.init_dense(fan_in, fan_out, gen))
        self.bias = nn.Parameter(torch.zeros(fan_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, relative: bool):
        super().__init__()
        d, self.heads, self.radius = cfg.d_model, cfg.heads, cfg.radius
        self.q, self.k, self.v, self.o = (Dense(d, d, gen) for _ in range(4))
        rows = 2 * cfg.radius + 1
        self.rel_emb = self.rel_bias = None
        if relative and cfg.rel_embeddings:
            self.rel_emb = nn.Parameter(T.init_embedding(rows, cfg.head_dim, gen))
        if relative and cfg.rel_biases:
            self.rel_bias = nn.Parameter(T.init_embedding(rows, cfg.heads, gen))
        self.last_weights = None

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, memory, keep):
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        labels = None
        if self.rel_emb is not None or self.rel_bias is not None:
            labels = relative_labels(x.shape[1], memory.shape[1], self.radius)
        out, self.last_weights = attention(q, k, v, keep, labels, self.rel_emb, self.rel_bias)
        b, _, n, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig, gen):
        super().__init__()
        self.inner = Dense(cfg.d_model, cfg.d_ff, gen)
        self.outer = Dense(cfg.d_ff, cfg.d_model, gen)

    def forward(self, x):
        return self.outer(torch.relu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, gen):
        super().__init__()
        self.attn = MultiHeadAttention(cfg, gen, cfg.relative)
        self.ff = FeedForward(cfg, gen)
        self.norm1, self.norm2 = LayerNorm(cfg.d_model), LayerNorm(cfg.d_model)

    def forward(self, x, keep):
        x = self.norm1(x + self.attn(x, x, keep))
        return self.norm2(x + self.ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, gen):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg, gen, cfg.relative)
        self.cross_attn = MultiHeadAttention(cfg, gen, cfg.cross_relative)
        self.ff = FeedForward(cfg, gen)
        self.norm1, self.norm2, self.norm3 = (LayerNorm(cfg.d_model) for _ in range(3))

    def forward(self, y, memory, self_keep, cross_keep):
        y = self.norm1(y + self.self_attn(y, y, self_keep))
        y = self.norm2(y + self.cross_attn(y, memory, cross_keep))
        return self.norm3(y + self.ff(y))


class ParentAttentionHead(nn.Module):
    """One-head attention whose raw scores (plus a NONE slot) classify the parent."""

    def __init__(self, d: int, gen):
        super().__init__()
        self.q, self.k = Dense(d, d, gen), Dense(d, d, gen)
        self.none_key = nn.Parameter(T.init_embedding(1, d, gen)[0])

    def forward(self, x, src_keep):
        q, k = self.q(x), self.k(x)
        scores = T.matmul(q, k.transpose(-1, -2))
        none = (q @ self.none_key)[..., None]
        scale = math.sqrt(x.shape[-1])
        logits = torch.cat([none, scores], dim=-1) / scale
        keep = torch.cat([torch.ones_like(src_keep[:, :1]), src_keep], dim=-1)
        return logits.masked_fill(~keep[:, None, :], float("-inf"))


# ---------------------------------------------------------------------------
# model


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        super().__init__()
        self.cfg, self.vocab_size = cfg, vocab_size
        gen = T.seeded(seed)
        d = cfg.d_model
        n_stack = 1 if cfg.share_layers else cfg.num_layers
        self.src_embed = nn.Parameter(T.init_embedding(vocab_size, d, gen))
        self.encoder = nn.ModuleList(EncoderLayer(cfg, gen) for _ in range(n_stack))
        if cfg.mode == "seq2seq":
            self.tgt_embed = nn.Parameter(T.init_embedding(vocab_size, d, gen))
            self.decoder = nn.ModuleList(DecoderLayer(cfg, gen) for _ in range(n_stack))
            self.out = Dense(d, vocab_size, gen)
            if cfg.copy_decoder:
                self.copy_query = nn.Parameter(T.init_dense(d, d, gen))
                if cfg.copy_gate == "step":
                    self.copy_gate = Dense(d, 1, gen)
                else:
                    self.copy_gate_logit = nn.Parameter(torch.zeros(()))
        else:
            if len(cfg.tag_sizes) != 4:
                raise ValueError("tagging mode needs four tag_sizes")
            if cfg.parent_head == "absolute":
                self.parent = Dense(d, cfg.max_len + 1, gen)
            elif cfg.parent_head == "relative":
                self.parent = Dense(d, 2 * cfg.max_len + 2, gen)
            else:
                self.parent = ParentAttentionHead(d, gen)
            self.tag_heads = nn.ModuleList(Dense(d, n, gen) for n in cfg.tag_sizes)

    # -- shared pieces -----------------------------------------------------

    def _layers(self, stack: nn.ModuleList):
        for i in range(self.cfg.num_layers):
            yield stack[0 if self.cfg.share_layers else i]

    def _embed(self, table, ids):
        x = table[ids] * math.sqrt(self.cfg.d_model)
        if self.cfg.encoding == "abs":
            x = x + sinusoid_table(ids.shape[1], self.cfg.d_model).to(x.dtype)
        return x

    def encode(self, src: torch.Tensor, src_keep: torch.Tensor | None = None) -> torch.Tensor:
        """``src`` is ``[B, S]`` ids; returns ``[B, S, d]``."""
        if src.dim() == 1:
            return self.encode(src[None], None if src_keep is None else src_keep[None])[0]
        if src.shape[1] > self.cfg.max_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_len {self.cfg.max_len}")
        if src_keep is None:
            src_keep = src != PAD_ID
        x = self._embed(self.src_embed, src)
        keep = src_keep[:, None, None, :]
        for layer in self._layers(self.encoder):
            x = layer(x, keep)
        return x

    def decode(self, memory, src, src_keep, tgt_in):
        """Decoder states ``[B, T, d]`` for teacher-forced inputs ``tgt_in``."""
        if self.cfg.mode != "seq2seq":
            raise ValueError("decode needs a seq2seq model")
        if not bool((tgt_in[:, 0] == BOS_ID).all()):
            raise ValueError("decoder prefix must start with BOS")
        n = tgt_in.shape[1]
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        self_keep = causal[None, None] & (tgt_in != PAD_ID)[:, None, None, :]
        cross_keep = src_keep[:, None, None, :]
        y = self._embed(self.tgt_embed, tgt_in)
        for layer in self._layers(self.decoder):
            y = layer(y, memory, self_keep, cross_keep)
        return y

    def copy_distribution(self, states, memory, src, src_keep):
        """Copy distribution ``p2`` over the vocabulary and the mixing weight ``w``."""
        scores = T.matmul(states @ self.copy_query, memory.transpose(-1, -2))
        weights = T.softmax(scores / math.sqrt(self.cfg.d_model), src_keep[:, None, :])
        one_hot = nn.functional.one_hot(src, self.vocab_size).to(weights.dtype)
        p2 = T.matmul(weights, one_hot)
        if self.cfg.copy_vocab_softmax:
            p2 = torch.softmax(p2, dim=-1)
        if self.cfg.copy_gate == "step":
            w = torch.sigmoid(self.copy_gate(states))
        else:
            w = torch.sigmoid(self.copy_gate_logit).expand(*states.shape[:-1], 1)
        return p2, w

    def output(self, states, memory, src, src_keep):
        """Returns ``(scores, from_probs)``: logits, or mixed probabilities with a copy decoder."""
        logits = self.out(states)
        if not self.cfg.copy_decoder:
            return logits, False
        p2, w = self.copy_distribution(states, memory, src, src_keep)
        return mix(torch.softmax(logits, dim=-1), p2, w), True

    def forward(self, src, tgt_in):
        src_keep = src != PAD_ID
        memory = self.encode(src, src_keep)
        states = self.decode(memory, src, src_keep, tgt_in)
        return self.output(states, memory, src, src_keep)

    def decode_step(self, memory, src, src_keep, prefix) -> torch.Tensor:
        """Next-token distribution ``[B, V]`` after ``prefix`` (which starts with BOS)."""
        states = self.decode(memory, src, src_keep, prefix)[:, -1:]
        scores, from_probs = self.output(states, memory, src, src_keep)
        return scores[:, 0] if from_probs else torch.softmax(scores[:, 0], dim=-1)

    def forward_tagging(self, src, src_keep=None) -> list[torch.Tensor]:
        """Per-token logits for parent, role, category, noun determiner, verb name."""
        if self.cfg.mode != "tagging":
            raise ValueError("forward_tagging needs a tagging model")
        if src_keep is None:
            src_keep = src != PAD_ID
        x = self.encode(src, src_keep)
        if self.cfg.parent_head == "attention":
            parent = self.parent(x, src_keep)
        else:
            parent = self.parent(x)
        return [parent] + [head(x) for head in self.tag_heads]


def mix(p1: torch.Tensor, p2: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return w * p1 + (1 - w) * p2


def parameter_count(model: nn.Module) -> int:
    """Distinct trainable scalars; shared layers count once."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# parent tag <-> class id


def parent_class(cfg: ModelConfig, token_index: int, parent: int) -> int:
    """Class id of a parent index (-1 = no parent) for the configured head."""
    if cfg.parent_head == "relative":
        if parent < 0:
            return 0
        offset = parent - token_index
        if abs(offset) > cfg.max_len:
            raise ValueError("parent offset beyond max_len")
        return 1 + offset + cfg.max_len
    return parent + 1


def parent_from_class(cfg: ModelConfig, token_index: int, cls: int) -> int:
    if cfg.parent_head == "relative":
        return -1 if cls == 0 else token_index + cls - 1 - cfg.max_len
    return cls - 1


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "compgen-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Transformer, vocab: Vocabulary,
                    tag_vocabs: list[Vocabulary] | None = None, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": vocab.to_list(),
        "tag_vocabs": [v.to_list() for v in tag_vocabs] if tag_vocabs else None,
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    # serialize in memory so the archive's internal record names do not
    # depend on the file name, keeping checkpoints byte-comparable
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, vocab, tag_vocabs, extra)``."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a compgen checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported")
    cfg = ModelConfig.from_dict(payload["config"])
    vocab = Vocabulary.from_list(payload["vocab"])
    model = Transformer(cfg, len(vocab))
    model.load_state_dict(payload["state"])
    tag_vocabs = payload["tag_vocabs"]
    if tag_vocabs is not None:
        tag_vocabs = [Vocabulary.from_list(v) for v in tag_vocabs]
    return model, vocab, tag_vocabs, payload["extra"]


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
