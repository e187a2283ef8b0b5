"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

The reproduction criteria train small models on CPU and take roughly an hour
in total on one core.
"""

import math
import random
import time
from dataclasses import replace

import pytest
import torch

from compgen import tensor as T
from compgen.data import PAD_ID, DatasetSpec, Example, Vocabulary, generate, governing_length
from compgen.evaluation import aggregate
from compgen.experiment import ExperimentConfig, run_experiment
from compgen.model import (
    ModelConfig,
    Transformer,
    attention,
    attention_logits,
    mix,
    parameter_count,
    preset,
    relative_label,
    relative_labels,
)
from compgen.training import TrainConfig, batch_loss, seq2seq_batch
from oracles import ORACLES

F64 = torch.float64


def tiny(encoding="rel2-eb", **kw):
    base = dict(encoding=encoding, num_layers=1, d_model=8, d_ff=16, heads=2, radius=2, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch():
    vocab = Vocabulary([str(i) for i in range(8)])
    exs = [Example(("1", "2", "3"), ("3", "2", "1")), Example(("4", "5"), ("5", "4", "4"))]
    return vocab, seq2seq_batch(exs, vocab)


# -- 1. gradients -------------------------------------------------------------


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(2024)
    worst = 0.0
    for trial in range(20):
        rows, cols = 1 + trial % 4, 1 + trial % 7

        def r(*shape):
            return torch.randn(*shape, generator=gen, dtype=F64).requires_grad_(True)

        a, b = r(rows, cols), r(cols, 3)
        w = torch.randn(rows, 3, generator=gen, dtype=F64)
        worst = max(worst, T.gradient_check(lambda: (T.matmul(a, b) * w).sum(), [a, b]))

        x = r(rows, cols + 1)
        keep = torch.rand(rows, cols + 1, generator=gen) > 0.3
        keep[:, 0] = True
        v = torch.randn(rows, cols + 1, generator=gen, dtype=F64)
        worst = max(worst, T.gradient_check(lambda: (T.softmax(x, keep) * v).sum(), [x]))

        y, g, bb = r(rows, cols + 1), r(cols + 1), r(cols + 1)
        worst = max(worst, T.gradient_check(lambda: (T.layer_norm(y, g, bb) * v).sum(), [y, g, bb]))

        logits = r(rows, cols + 1)
        targets = torch.randint(0, cols + 1, (rows,), generator=gen)
        worst = max(worst, T.gradient_check(lambda: T.cross_entropy(logits, targets), [logits]))
        worst = max(worst, T.gradient_check(
            lambda: T.cross_entropy(torch.softmax(logits, -1), targets, from_probs=True), [logits]))

        # attention with relative embeddings and biases, and the copy mixture
        n, radius = 2 + trial % 4, 1 + trial % 3
        q, k, vv = r(1, 2, n, 3), r(1, 2, n, 3), r(1, 2, n, 3)
        emb, bias = r(2 * radius + 1, 3), r(2 * radius + 1, 2)
        labels = relative_labels(n, n, radius)
        u = torch.randn(1, 2, n, 3, generator=gen, dtype=F64)
        worst = max(worst, T.gradient_check(
            lambda: (attention(q, k, vv, None, labels, emb, bias)[0] * u).sum(), [q, k, vv, emb, bias]))
        p1, p2, gate = r(rows, 4), r(rows, 4), r(rows, 1)
        t = torch.randn(rows, 4, generator=gen, dtype=F64)
        worst = max(worst, T.gradient_check(
            lambda: (mix(torch.softmax(p1, -1), torch.softmax(p2, -1), torch.sigmoid(gate)) * t).sum(),
            [p1, p2, gate]))

    end_to_end = 0.0
    vocab, batch = toy_batch()
    for encoding in ("abs", "rel-eb", "rel2-eb"):
        model = Transformer(tiny(encoding, copy_decoder=True), len(vocab), seed=11).double()
        end_to_end = max(end_to_end, T.gradient_check(lambda: batch_loss(model, batch), list(model.parameters())))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and end_to_end <= 1e-3 and elapsed < 60
    acceptance(1, ok, f"primitives max rel err {worst:.2e} (<=1e-4), end-to-end {end_to_end:.2e} "
                      f"(<=1e-3), {elapsed:.1f}s (<60s)")
    assert ok


# -- 2. relative positions ----------------------------------------------------


def brute_force_logits(q, k, radius, emb, bias):
    _, h, n, dh = q.shape
    m = k.shape[2]
    out = torch.zeros(1, h, n, m, dtype=q.dtype)
    for hh in range(h):
        for i in range(n):
            for j in range(m):
                lab = min(max(j - i, -radius), radius) + radius
                out[0, hh, i, j] = (float(q[0, hh, i] @ (k[0, hh, j] + emb[lab])) / math.sqrt(dh)
                                    + float(bias[lab, hh]))
    return out


def test_criterion_2_position_properties(acceptance):
    start = time.perf_counter()
    rng = random.Random(7)
    translation = clipping = 0
    for _ in range(2000):
        i, j, shift = rng.randrange(60), rng.randrange(60), rng.randrange(-30, 30)
        if min(i, j) + shift < 0:
            continue
        assert relative_label(i, j, 16) == relative_label(i + shift, j + shift, 16)
        translation += 1
        if abs(j - i) > 16:
            assert relative_label(i, j, 16) == (32 if j > i else 0)
            clipping += 1
    labels = relative_labels(40, 40, 16)
    for i in range(40):
        for j in range(40):
            assert labels[i, j].item() == min(max(j - i, -16), 16) + 16

    gen = torch.Generator().manual_seed(3)
    worst = 0.0
    for trial in range(5):
        n = 20 + 5 * trial  # long enough that offsets beyond 16 occur
        q = torch.randn(1, 2, n, 4, generator=gen, dtype=F64)
        k = torch.randn(1, 2, n, 4, generator=gen, dtype=F64)
        emb = torch.randn(33, 4, generator=gen, dtype=F64)
        bias = torch.randn(33, 2, generator=gen, dtype=F64)
        got = attention_logits(q, k, relative_labels(n, n, 16), emb, bias)
        worst = max(worst, (got - brute_force_logits(q, k, 16, emb, bias)).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and clipping > 0 and elapsed < 60
    acceptance(2, ok, f"{translation} translation pairs, {clipping} clipped pairs at radius 16, "
                      f"brute-force logit gap {worst:.1e}, {elapsed:.1f}s (<60s)")
    assert ok


# -- 3. copy decoder ----------------------------------------------------------


def test_criterion_3_copy_properties(acceptance):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(5)
    vocab_size = 30
    model = Transformer(tiny(copy_decoder=True), vocab_size, seed=5)
    worst_sum = 0.0
    support_ok = endpoints_ok = True
    with torch.no_grad():
        for _ in range(300):
            b, n, steps = 2, int(torch.randint(1, 12, (1,), generator=gen)), 3
            src = torch.randint(3, vocab_size, (b, n), generator=gen)
            src[1, n // 2 + 1:] = PAD_ID
            keep = src != PAD_ID
            memory = model.encode(src, keep)
            states = torch.randn(b, steps, 8, generator=gen)
            p2, w = model.copy_distribution(states, memory, src, keep)
            worst_sum = max(worst_sum, (p2.sum(-1) - 1).abs().max().item())
            for row in range(b):
                support = set(torch.nonzero(p2[row].sum(0) > 0).flatten().tolist())
                support_ok &= support <= set(src[row][keep[row]].tolist())
            p1 = torch.softmax(torch.randn(b, steps, vocab_size, generator=gen), -1)
            endpoints_ok &= torch.equal(mix(p1, p2, torch.ones_like(w)), p1)
            endpoints_ok &= torch.equal(mix(p1, p2, torch.zeros_like(w)), p2)
    elapsed = time.perf_counter() - start
    ok = worst_sum < 1e-5 and support_ok and endpoints_ok and elapsed < 60
    acceptance(3, ok, f"max |sum p2 - 1| {worst_sum:.1e}, support within source {support_ok}, "
                      f"exact endpoints {endpoints_ok}, {elapsed:.1f}s (<60s)")
    assert ok


# -- 4. weight sharing --------------------------------------------------------


def test_criterion_4_weight_sharing(acceptance):
    start = time.perf_counter()
    counts = {layers: parameter_count(Transformer(preset(f"small-{layers}s"), 20)) for layers in (2, 4, 6)}
    vocab, batch = toy_batch()
    shared = Transformer(tiny(num_layers=2, share_layers=True, copy_decoder=True), len(vocab), seed=7).double()
    unshared = Transformer(tiny(num_layers=2, copy_decoder=True), len(vocab), seed=7).double()
    state = {}
    for name, value in shared.state_dict().items():
        if name.startswith(("encoder.0.", "decoder.0.")):
            for layer in range(2):
                state[name.replace(".0.", f".{layer}.", 1)] = value
        else:
            state[name] = value
    unshared.load_state_dict(state)
    batch_loss(shared, batch).backward()
    batch_loss(unshared, batch).backward()
    grads = dict(unshared.named_parameters())
    worst = 0.0
    for name, p in shared.named_parameters():
        if name.startswith(("encoder.0.", "decoder.0.")):
            total = grads[name].grad + grads[name.replace(".0.", ".1.", 1)].grad
        else:
            total = grads[name].grad
        worst = max(worst, (p.grad - total).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = len(set(counts.values())) == 1 and worst < 1e-10 and elapsed < 60
    acceptance(4, ok, f"shared counts l=2/4/6 {sorted(set(counts.values()))}, "
                      f"shared-vs-summed gradient gap {worst:.1e}, {elapsed:.1f}s (<60s)")
    assert ok


# -- 5. dataset oracles -------------------------------------------------------


def test_criterion_5_dataset_oracles(acceptance):
    start = time.perf_counter()
    mismatches, disjoint = {}, True
    negative_rate = None
    for task in ("add", "addneg", "reverse", "dup", "cart", "inters"):
        data = generate(DatasetSpec(task, train_size=9000, test_size=1000, seed=11))
        examples = data.train + data.test
        assert len(examples) == 10000
        mismatches[task] = sum(ORACLES[task](ex) != ex.tgt for ex in examples)
        train_lengths = {governing_length(task, ex) for ex in data.train}
        test_lengths = {governing_length(task, ex) for ex in data.test}
        disjoint &= not (train_lengths & test_lengths)
        if task == "addneg":
            operands = negatives = 0
            for ex in examples:
                cut = ex.src.index("+")
                negatives += ("-" in ex.src[:cut]) + ("-" in ex.src[cut + 1:])
                operands += 2
            negative_rate = negatives / operands
    elapsed = time.perf_counter() - start
    ok = (not any(mismatches.values()) and disjoint and abs(negative_rate - 0.25) <= 0.02
          and elapsed < 120)
    acceptance(5, ok, f"oracle mismatches {mismatches} over 10000 each, length-disjoint {disjoint}, "
                      f"AddNeg negative rate {negative_rate:.4f} (0.25+-0.02), {elapsed:.1f}s (<120s)")
    assert ok


# -- reproduction runs ----------------------------------------------------------


def run_pair(out, dataset, configs, training, repetitions=3):
    """run_experiment for each named model config; returns {name: results}."""
    results = {}
    for name, model in configs.items():
        cfg = ExperimentConfig(name=name, dataset=dataset, model=model, training=training,
                               repetitions=repetitions, base_seed=0, output_dir=str(out / name))
        results[name] = run_experiment(cfg)
    return results


ADD_DATA = DatasetSpec("add", train_size=20000, test_size=1024, train_len_range=(1, 4),
                       test_len_range=(5, 6), pad_width=8, pad_target=True)
ADD_MODELS = {enc: preset("small-2", encoding=enc, copy_decoder=False, max_len=18) for enc in ("rel2-e", "abs")}
ADD_TRAINING = TrainConfig(epochs=10, batch_size=64, warmup=1000)


@pytest.fixture(scope="module")
def add_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("add-a")
    start = time.perf_counter()
    results = run_pair(out, ADD_DATA, ADD_MODELS, ADD_TRAINING)
    return out, results, time.perf_counter() - start


def test_criterion_6_add_contrast(add_runs, acceptance):
    _, results, elapsed = add_runs
    rel, ab = aggregate(results["rel2-e"]), aggregate(results["abs"])
    ok = rel.max >= 0.70 and ab.max <= 0.15 and elapsed <= 30 * 60
    acceptance(6, ok, f"Add 5-6 digit test, best of 3: rel2-e {rel.max:.3f} (>=0.70), abs {ab.max:.3f} "
                      f"(<=0.15), {elapsed / 60:.1f} min (<=30)")
    assert ok


def test_criterion_7_dup_contrast(tmp_path, acceptance):
    data = DatasetSpec("dup", train_size=20000, test_size=1024, train_len_range=(1, 8), test_len_range=(9, 12))
    models = {enc: preset("small-2", encoding=enc, copy_decoder=False, radius=4, max_len=26)
              for enc in ("rel-e", "abs")}
    start = time.perf_counter()
    results = run_pair(tmp_path, data, models, TrainConfig(epochs=8, batch_size=64, warmup=1000))
    elapsed = time.perf_counter() - start
    rel, ab = aggregate(results["rel-e"]), aggregate(results["abs"])
    ok = rel.max >= 0.30 and ab.max <= 0.05 and elapsed <= 30 * 60
    acceptance(7, ok, f"Dup 9-12 test, best of 3: rel-e {rel.max:.3f} (>=0.30), abs {ab.max:.3f} (<=0.05), "
                      f"{elapsed / 60:.1f} min (<=30)")
    assert ok


def test_criterion_8_copy_decoder_benefit(tmp_path, acceptance):
    data = DatasetSpec("revdup", train_size=10000, test_size=1024, train_len_range=(1, 7),
                       test_len_range=(8, 8), alphabet=50)
    models = {name: preset("small-2", encoding="rel-eb", copy_decoder=copy, radius=4, max_len=18)
              for name, copy in (("rel-eb", False), ("rel-eb-c", True))}
    start = time.perf_counter()
    results = run_pair(tmp_path, data, models, TrainConfig(epochs=10, batch_size=64, warmup=1000))
    elapsed = time.perf_counter() - start
    plain, copy = aggregate(results["rel-eb"]), aggregate(results["rel-eb-c"])
    ok = copy.mean >= plain.mean and elapsed <= 30 * 60
    acceptance(8, ok, f"reverse/duplicate mixture, mean of 3: rel-eb-c {copy.mean:.3f} >= rel-eb "
                      f"{plain.mean:.3f}, {elapsed / 60:.1f} min (<=30)")
    assert ok


def test_criterion_9_iid_reverse(tmp_path, acceptance):
    data = DatasetSpec("reverse", train_size=10000, test_size=1024, train_len_range=(1, 12),
                       test_len_range=(1, 12), iid=True)
    model = preset("small-2", encoding="rel2-eb", copy_decoder=False, max_len=14)
    start = time.perf_counter()
    results = run_pair(tmp_path, data, {"rel2-eb": model}, TrainConfig(epochs=20, batch_size=64, warmup=1000),
                       repetitions=1)
    elapsed = time.perf_counter() - start
    acc = results["rel2-eb"][0].sequence_accuracy
    ok = acc >= 0.95 and elapsed <= 10 * 60
    acceptance(9, ok, f"i.i.d. Reverse: small-2 rel2-eb {acc:.3f} (>=0.95), {elapsed / 60:.1f} min (<=10)")
    assert ok


def test_criterion_10_determinism(add_runs, tmp_path, acceptance):
    first, _, _ = add_runs
    second = tmp_path / "add-b"
    run_pair(second, ADD_DATA, ADD_MODELS, ADD_TRAINING)
    compared, differing = 0, []
    for name in ADD_MODELS:
        files = ["summary.csv"] + [f"checkpoints/run-{r}.pt" for r in range(3)]
        for rel in files:
            compared += 1
            if (first / name / rel).read_bytes() != (second / name / rel).read_bytes():
                differing.append(f"{name}/{rel}")
    ok = not differing
    acceptance(10, ok, f"rerun of the Add experiment: {compared - len(differing)}/{compared} "
                       f"checkpoints and summaries byte-identical")
    assert ok
