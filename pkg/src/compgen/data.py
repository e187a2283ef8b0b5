"""Algorithmic dataset generators, TSV ingestion and the token vocabulary.

Token inventories (PAD/BOS/EOS are reserved and never appear in raw text):

    add      digits 0-9, ``#`` (pad digit), ``+``
    addneg   add plus ``-``
    reverse  digits 0-9 (or ``s0``.. when ``alphabet`` > 10)
    dup      same as reverse
    cart     ``a``-``j`` on the left, digits on the right, ``|`` separator
    inters   ``a0``-``a99``, ``|`` separator, ``true`` / ``false``
    revdup   a ``reverse`` / ``duplicate`` function word followed by symbols
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

PAD, BOS, EOS = "<pad>", "<s>", "</s>"
SPECIALS = (PAD, BOS, EOS)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

DIGITS = tuple(str(i) for i in range(10))
PAD_DIGIT = "#"
SEP = "|"
TAG_FIELDS = ("parent", "role", "category", "noun_determiner", "verb_name")
NO_PARENT = "-1"

TASKS = ("add", "addneg", "reverse", "dup", "cart", "inters", "revdup")


@dataclass(frozen=True)
class Example:
    src: tuple[str, ...]
    tgt: tuple[str, ...] = ()
    # five parallel tag columns, each aligned with src; None for seq2seq
    tags: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        if not self.src:
            raise ValueError("example source is empty")
        for tok in (*self.src, *self.tgt):
            if tok in SPECIALS:
                raise ValueError(f"reserved token {tok!r} in example text")


class Vocabulary:
    """Bidirectional token/id map with PAD=0, BOS=1, EOS=2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_examples(cls, *splits: Iterable[Example]) -> "Vocabulary":
        """Union of source and target tokens, sorted for stability."""
        seen: set[str] = set()
        for split in splits:
            for ex in split:
                seen.update(ex.src)
                seen.update(ex.tgt)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as err:
            raise KeyError(f"token {err.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with PAD, BOS, EOS")
        return cls(itos[3:])


# per-task defaults: (train range, test range, epochs)
_DEFAULTS = {
    "add": ((1, 8), (9, 10), 2),
    "addneg": ((1, 8), (9, 10), 10),
    "reverse": ((1, 16), (17, 24), 2),
    "dup": ((1, 16), (17, 24), 4),
    "cart": ((1, 6), (7, 8), 4),
    "inters": ((1, 16), (17, 24), 8),
    "revdup": ((1, 16), (17, 24), 4),
}


@dataclass
class DatasetSpec:
    task: str
    train_size: int = 200000
    test_size: int = 1024
    train_len_range: tuple[int, int] | None = None
    test_len_range: tuple[int, int] | None = None
    seed: int = 0
    pad_width: int = 12
    alphabet: int = 10
    iid: bool = False
    # left-pad the sum to pad_width as well, so output digit k sits under input column k
    pad_target: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        train, test, _ = _DEFAULTS[self.task]
        self.train_len_range = tuple(self.train_len_range or train)
        self.test_len_range = tuple(self.test_len_range or test)
        for lo, hi in (self.train_len_range, self.test_len_range):
            if not 1 <= lo <= hi:
                raise ValueError(f"bad length range ({lo}, {hi})")
        if not self.iid:
            (a, b), (c, d) = self.train_len_range, self.test_len_range
            if not (b < c or d < a):
                raise ValueError("train and test length ranges overlap")
        if self.task in ("add", "addneg"):
            # the sum can gain a digit, and a sign under addneg
            longest = max(self.train_len_range[1], self.test_len_range[1]) + 1
            if longest + (self.task == "addneg") > self.pad_width:
                raise ValueError("pad_width too small for the operand lengths")

    @property
    def default_epochs(self) -> int:
        return _DEFAULTS[self.task][2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_len_range"] = list(self.train_len_range)
        d["test_len_range"] = list(self.test_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Dataset:
    name: str
    train: list[Example]
    test: list[Example]
    spec: DatasetSpec | None = None
    tagging: bool = False
    vocab: Vocabulary = field(default=None, repr=False)
    tag_vocabs: list[Vocabulary] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = Vocabulary.from_examples(self.train, self.test)
        if self.tagging and self.tag_vocabs is None:
            self.tag_vocabs = tag_vocabularies(self.train, self.test)


def tag_vocabularies(*splits: Iterable[Example]) -> list[Vocabulary]:
    """One label vocabulary per non-parent tag column."""
    columns: list[set[str]] = [set() for _ in TAG_FIELDS[1:]]
    for split in splits:
        for ex in split:
            for seen, col in zip(columns, ex.tags[1:]):
                seen.update(col)
    return [Vocabulary(sorted(c)) for c in columns]


# ---------------------------------------------------------------------------
# generators


def _number(rng: random.Random, ndigits: int) -> int:
    if ndigits == 1:
        return rng.randrange(10)
    return rng.randrange(10 ** (ndigits - 1), 10**ndigits)


def _padded(value: int, width: int) -> list[str]:
    body = list(str(abs(value)))
    if value < 0:
        body = ["-"] + body
    return [PAD_DIGIT] * (width - len(body)) + body


def addition_example(a: int, b: int, width: int = 12, pad_target: bool = False) -> Example:
    src = _padded(a, width) + ["+"] + _padded(b, width)
    total = a + b
    if pad_target:
        tgt = _padded(total, width)
    else:
        tgt = (["-"] if total < 0 else []) + list(str(abs(total)))
    return Example(tuple(src), tuple(tgt))


def _symbols(spec: DatasetSpec) -> tuple[str, ...]:
    if spec.alphabet == 10:
        return DIGITS
    return tuple(f"s{i}" for i in range(spec.alphabet))


def _addition_sampler(negatives: bool):
    def sample(rng: random.Random, spec: DatasetSpec, lo: int, hi: int) -> Example:
        operands = []
        for _ in range(2):
            value = _number(rng, rng.randint(lo, hi))
            if negatives and rng.random() < 0.25:
                if value == 0:
                    value = rng.randrange(1, 10)
                value = -value
            operands.append(value)
        return addition_example(*operands, width=spec.pad_width, pad_target=spec.pad_target)

    return sample


def _sequence(rng: random.Random, spec: DatasetSpec, lo: int, hi: int) -> list[str]:
    symbols = _symbols(spec)
    return [rng.choice(symbols) for _ in range(rng.randint(lo, hi))]


def _reverse(rng, spec, lo, hi):
    seq = _sequence(rng, spec, lo, hi)
    return Example(tuple(seq), tuple(reversed(seq)))


def _duplicate(rng, spec, lo, hi):
    seq = _sequence(rng, spec, lo, hi)
    return Example(tuple(seq), tuple(seq + seq))


def _revdup(rng, spec, lo, hi):
    if rng.random() < 0.5:
        word, ex = "reverse", _reverse(rng, spec, lo, hi)
    else:
        word, ex = "duplicate", _duplicate(rng, spec, lo, hi)
    return Example((word,) + ex.src, ex.tgt)


CART_LEFT = tuple("abcdefghij")
CART_RIGHT = DIGITS


def cartesian_example(left: Sequence[str], right: Sequence[str]) -> Example:
    tgt = []
    for x in left:
        for y in right:
            tgt += [x, y]
    return Example(tuple(left) + (SEP,) + tuple(right), tuple(tgt))


def _cartesian(rng, spec, lo, hi):
    hi_left, hi_right = min(hi, len(CART_LEFT)), min(hi, len(CART_RIGHT))
    left = rng.sample(CART_LEFT, rng.randint(lo, hi_left))
    right = rng.sample(CART_RIGHT, rng.randint(lo, hi_right))
    return cartesian_example(left, right)


INTERS_SYMBOLS = tuple(f"a{i}" for i in range(100))


def intersection_example(left: Sequence[str], right: Sequence[str]) -> Example:
    label = "true" if set(left) & set(right) else "false"
    return Example(tuple(left) + (SEP,) + tuple(right), (label,))


def _intersection(rng, spec, lo, hi, want: bool):
    n, m = rng.randint(lo, hi), rng.randint(lo, hi)
    left = rng.sample(INTERS_SYMBOLS, n)
    if want:
        shared = rng.choice(left)
        pool = [s for s in INTERS_SYMBOLS if s != shared]
        right = rng.sample(pool, m - 1)
        right.insert(rng.randrange(m), shared)
    else:
        pool = [s for s in INTERS_SYMBOLS if s not in set(left)]
        right = rng.sample(pool, m)
    return intersection_example(left, right)


_SAMPLERS: dict[str, Callable] = {
    "add": _addition_sampler(False),
    "addneg": _addition_sampler(True),
    "reverse": _reverse,
    "dup": _duplicate,
    "cart": _cartesian,
    "revdup": _revdup,
}


def governing_length(task: str, ex: Example) -> int:
    """Length that decides which split an example belongs to."""
    if task in ("add", "addneg"):
        width = (len(ex.src) - 1) // 2
        halves = ex.src[:width], ex.src[width + 1 :]
        return max(sum(t in DIGITS for t in h) for h in halves)
    if task in ("reverse", "dup"):
        return len(ex.src)
    if task == "revdup":
        return len(ex.src) - 1
    if task in ("cart", "inters"):
        cut = ex.src.index(SEP)
        return max(cut, len(ex.src) - cut - 1)
    raise ValueError(task)


def _fill(
    sample: Callable[[int], Example],
    size: int,
    exclude: set[tuple] | None = None,
    max_tries: int = 200,
) -> list[Example]:
    """Draw ``size`` distinct examples; ``sample(k)`` builds the k-th one."""
    seen: set[tuple] = set()
    out: list[Example] = []
    misses = 0
    while len(out) < size:
        ex = sample(len(out))
        key = (ex.src, ex.tgt)
        if key in seen or (exclude and key in exclude):
            misses += 1
            if misses > max_tries * max(size, 1):
                raise RuntimeError(
                    f"could only draw {len(out)} distinct examples out of {size}"
                )
            continue
        seen.add(key)
        out.append(ex)
    return out


def generate(spec: DatasetSpec) -> Dataset:
    """Build the train/test splits for ``spec``; a pure function of ``spec``."""
    rng = random.Random(spec.seed)
    splits = []
    exclude = None
    for size, (lo, hi) in (
        (spec.train_size, spec.train_len_range),
        (spec.test_size, spec.test_len_range),
    ):
        if spec.task == "inters":
            # alternate labels so each split is exactly balanced
            def draw(k, lo=lo, hi=hi):
                return _intersection(rng, spec, lo, hi, want=k % 2 == 0)
        else:
            sampler = _SAMPLERS[spec.task]

            def draw(k, lo=lo, hi=hi, sampler=sampler):
                return sampler(rng, spec, lo, hi)

        split = _fill(draw, size, exclude)
        splits.append(split)
        if spec.iid:
            exclude = {(ex.src, ex.tgt) for ex in split}
    return Dataset(spec.task, splits[0], splits[1], spec)


def gen_addition(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "add"))


def gen_addition_negatives(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "addneg"))


def gen_reverse(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "reverse"))


def gen_duplicate(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "dup"))


def gen_cartesian(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "cart"))


def gen_intersection(spec: DatasetSpec) -> Dataset:
    return generate(_as_task(spec, "inters"))


def _as_task(spec: DatasetSpec, task: str) -> DatasetSpec:
    if spec.task != task:
        raise ValueError(f"spec is for {spec.task!r}, not {task!r}")
    return spec


# ---------------------------------------------------------------------------
# TSV


def _split_line(line: str, path, lineno: int, ncols: int) -> list[str]:
    cols = line.rstrip("\n").rstrip("\r").split("\t")
    if len(cols) != ncols or not cols[0].strip():
        raise ValueError(f"{path}:{lineno}: expected {ncols} tab-separated fields")
    return cols


def load_tsv_seq2seq(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            src, tgt = _split_line(line, path, lineno, 2)
            try:
                out.append(Example(tuple(src.split()), tuple(tgt.split())))
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


def load_tsv_tagging(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            cols = _split_line(line, path, lineno, 1 + len(TAG_FIELDS))
            src = tuple(cols[0].split())
            tags = tuple(tuple(c.split()) for c in cols[1:])
            for name, col in zip(TAG_FIELDS, tags):
                if len(col) != len(src):
                    raise ValueError(
                        f"{path}:{lineno}: {name} has {len(col)} tags for {len(src)} tokens"
                    )
            for p in tags[0]:
                if p != NO_PARENT and not (p.isdigit() and int(p) < len(src)):
                    raise ValueError(f"{path}:{lineno}: bad parent index {p!r}")
            out.append(Example(src, (), tags))
    return out


def write_tsv(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for ex in examples:
            cols = [" ".join(ex.src)]
            if ex.tags is None:
                cols.append(" ".join(ex.tgt))
            else:
                cols += [" ".join(col) for col in ex.tags]
            fh.write("\t".join(cols) + "\n")


def write_dataset(dataset: Dataset, outdir) -> list[Path]:
    """Write ``<task>.train.tsv``, ``<task>.test.tsv`` and a JSON sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in ("train", "test"):
        p = outdir / f"{dataset.name}.{split}.tsv"
        write_tsv(p, getattr(dataset, split))
        paths.append(p)
    sidecar = outdir / f"{dataset.name}.json"
    meta = {"spec": dataset.spec.to_dict() if dataset.spec else None,
            "train_size": len(dataset.train), "test_size": len(dataset.test),
            "vocab": dataset.vocab.to_list()}
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    paths.append(sidecar)
    return paths


def load_tsv_dataset(train_path, test_path, tagging: bool = False, name: str | None = None) -> Dataset:
    loader = load_tsv_tagging if tagging else load_tsv_seq2seq
    train, test = loader(train_path), loader(test_path)
    name = name or Path(train_path).name.split(".")[0]
    return Dataset(name, train, test, tagging=tagging)

