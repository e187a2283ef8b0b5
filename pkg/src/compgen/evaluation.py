"""Greedy decoding, sequence-level accuracy and multi-run aggregation."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from compgen.data import BOS_ID, EOS_ID, PAD_ID, Example, Vocabulary
from compgen.model import Transformer, parent_from_class
from compgen.training import pad_rows


@dataclass
class Decoded:
    tokens: list[str]
    truncated: bool = False


def max_decode_steps(model: Transformer) -> int:
    return 2 * model.cfg.max_len + 4


@torch.no_grad()
def greedy_decode_ids(model: Transformer, src: torch.Tensor, max_steps: int | None = None):
    """Greedy decoding of a padded ``[B, S]`` batch.

    Returns a list of ``(ids, truncated)``; EOS is stripped. PAD and BOS are
    never emitted and ties go to the lowest id.
    """
    if model.cfg.mode != "seq2seq":
        raise ValueError("greedy decoding needs a seq2seq model")
    max_steps = max_steps or max_decode_steps(model)
    src_keep = src != PAD_ID
    memory = model.encode(src, src_keep)
    n = src.shape[0]
    prefix = torch.full((n, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    for _ in range(max_steps):
        dist = model.decode_step(memory, src, src_keep, prefix).clone()
        dist[:, PAD_ID] = -1.0
        dist[:, BOS_ID] = -1.0
        nxt = dist.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break
    out = []
    for row, finished in zip(prefix[:, 1:].tolist(), done.tolist()):
        ids = row[: row.index(EOS_ID)] if finished else [i for i in row if i != PAD_ID]
        out.append((ids, not finished))
    return out


def greedy_decode(model: Transformer, vocab: Vocabulary, sources: Sequence[Sequence[str]] | Sequence[str],
                  batch_size: int = 256) -> list[Decoded] | Decoded:
    """Decode one token sequence, or a list of them."""
    single = bool(sources) and isinstance(sources[0], str)
    batch = [sources] if single else list(sources)
    results = []
    for start in range(0, len(batch), batch_size):
        chunk = batch[start : start + batch_size]
        src = pad_rows([vocab.encode(s) for s in chunk])
        for ids, truncated in greedy_decode_ids(model, src):
            results.append(Decoded(vocab.decode(ids), truncated))
    return results[0] if single else results


def sequence_accuracy(predictions: Sequence[Sequence], targets: Sequence[Sequence]) -> float:
    if len(predictions) != len(targets):
        raise ValueError("prediction and target counts differ")
    if not targets:
        raise ValueError("empty evaluation set")
    return sum(list(p) == list(t) for p, t in zip(predictions, targets)) / len(targets)


def tagging_correct(pred: Sequence[Sequence], gold: Sequence[Sequence]) -> bool:
    """True iff every head is right at every token. Heads are parallel columns."""
    if len(pred) != len(gold):
        raise ValueError("head count mismatch")
    lengths = {len(col) for col in (*pred, *gold)}
    if len(lengths) != 1:
        raise ValueError("tag column lengths differ")
    return all(list(p) == list(g) for p, g in zip(pred, gold))


def tagging_accuracy(predictions, targets) -> float:
    if len(predictions) != len(targets):
        raise ValueError("prediction and target counts differ")
    if not targets:
        raise ValueError("empty evaluation set")
    return sum(tagging_correct(p, g) for p, g in zip(predictions, targets)) / len(targets)


@torch.no_grad()
def predict_tags(model: Transformer, vocab: Vocabulary, tag_vocabs: list[Vocabulary],
                 examples: Sequence[Example], batch_size: int = 256) -> list[tuple[tuple[str, ...], ...]]:
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        src = pad_rows([vocab.encode(ex.src) for ex in chunk])
        heads = [h.argmax(dim=-1).tolist() for h in model.forward_tagging(src)]
        for b, ex in enumerate(chunk):
            n = len(ex.src)
            parent = tuple(str(parent_from_class(model.cfg, i, c)) for i, c in enumerate(heads[0][b][:n]))
            rest = tuple(tuple(tv.decode(heads[k + 1][b][:n])) for k, tv in enumerate(tag_vocabs))
            out.append((parent,) + rest)
    return out


# ---------------------------------------------------------------------------
# results


@dataclass
class RunResult:
    dataset: str
    config: str
    seed: int
    sequence_accuracy: float
    correct: list[bool] = field(default_factory=list)
    truncated: int = 0

    def __post_init__(self):
        if self.correct and not math.isclose(
            self.sequence_accuracy, sum(self.correct) / len(self.correct)
        ):
            raise ValueError("sequence_accuracy disagrees with the correctness bitmap")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "RunResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(model, vocab, examples: Sequence[Example], tag_vocabs=None, *, dataset="", config="",
             seed=0) -> RunResult:
    if model.cfg.mode == "tagging":
        preds = predict_tags(model, vocab, tag_vocabs, examples)
        correct = [tagging_correct(p, ex.tags) for p, ex in zip(preds, examples)]
        truncated = 0
    else:
        decoded = greedy_decode(model, vocab, [ex.src for ex in examples])
        correct = [not d.truncated and d.tokens == list(ex.tgt) for d, ex in zip(decoded, examples)]
        truncated = sum(d.truncated for d in decoded)
    if not correct:
        raise ValueError("empty evaluation set")
    return RunResult(dataset, config, seed, sum(correct) / len(correct), correct, truncated)


@dataclass
class Aggregate:
    mean: float
    max: float
    stddev: float
    runs: int


def aggregate(results: Iterable[RunResult]) -> Aggregate:
    """Mean, max and population standard deviation over repeated runs."""
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    groups = {(r.dataset, r.config) for r in results}
    if len(groups) > 1:
        raise ValueError(f"mixed (dataset, config) groups: {sorted(groups)}")
    accs = [r.sequence_accuracy for r in results]
    return Aggregate(statistics.fmean(accs), max(accs), statistics.pstdev(accs), len(accs))


def summary_rows(results: Iterable[RunResult], stat: str = "mean") -> tuple[list[str], list[dict]]:
    """Summary rows: one per config, one column per dataset, then Avg."""
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.config, r.dataset), []).append(r)
    configs = list(dict.fromkeys(c for c, _ in groups))
    datasets = list(dict.fromkeys(d for _, d in groups))
    rows = []
    for c in configs:
        row = {"config": c}
        vals = []
        for d in datasets:
            if (c, d) in groups:
                v = getattr(aggregate(groups[(c, d)]), stat)
                row[d] = v
                vals.append(v)
        row["Avg"] = statistics.fmean(vals)
        rows.append(row)
    return datasets, rows


def write_summary_csv(path, datasets: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config", *datasets, "Avg"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def markdown_table(datasets: list[str], rows: list[dict]) -> str:
    head = ["config", *datasets, "Avg"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in rows:
        cells = [row["config"]] + [
            f"{row[d]:.3f}" if d in row else "" for d in (*datasets, "Avg")
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
