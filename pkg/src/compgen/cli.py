"""Command-line entry point: ``compgen-lab <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from compgen.data import TASKS, DatasetSpec, generate, load_tsv_dataset, write_dataset
from compgen.evaluation import evaluate, markdown_table
from compgen.experiment import (
    ExperimentConfig,
    default_output_root,
    describe,
    expand_grid,
    load_data,
    model_config_for,
    run_experiment,
    sweep,
)
from compgen.model import ENCODINGS, Transformer, load_checkpoint, parameter_count, preset, save_checkpoint
from compgen.training import TrainConfig, train

log = logging.getLogger("compgen")


def _range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# flag -> (ModelConfig field, type)
MODEL_FLAGS = {
    "encoding": ("encoding", str),
    "layers": ("num_layers", int),
    "dmodel": ("d_model", int),
    "dff": ("d_ff", int),
    "heads": ("heads", int),
    "radius": ("radius", int),
    "max_len": ("max_len", int),
    "parent_head": ("parent_head", str),
    "copy_gate": ("copy_gate", str),
}
TRAIN_FLAGS = ("epochs", "batch_size", "warmup", "lr_scale", "checkpoint_every")
DATA_FLAGS = {"train_size": "train_size", "test_size": "test_size", "train_range": "train_len_range",
              "test_range": "test_len_range", "data_seed": "seed", "pad_width": "pad_width",
              "alphabet": "alphabet"}


def add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--task", choices=TASKS)
    g.add_argument("--train-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--train-range", type=_range, help="e.g. 1-8")
    g.add_argument("--test-range", type=_range, help="e.g. 9-10")
    g.add_argument("--data-seed", type=int)
    g.add_argument("--pad-width", type=int)
    g.add_argument("--pad-target", action="store_true", default=None)
    g.add_argument("--alphabet", type=int)
    g.add_argument("--iid", action="store_true", default=None)
    g.add_argument("--train-tsv")
    g.add_argument("--test-tsv")
    g.add_argument("--tagging", action="store_true", default=None)


def add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--preset", help="small-2, large-4s, rel2-eb-c, ...")
    g.add_argument("--encoding", choices=ENCODINGS)
    g.add_argument("--copy-decoder", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--share-layers", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--layers", type=int)
    g.add_argument("--dmodel", type=int)
    g.add_argument("--dff", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--radius", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--parent-head", choices=("absolute", "relative", "attention"))
    g.add_argument("--copy-gate", choices=("step", "global"))


def add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--warmup", type=int)
    g.add_argument("--lr-scale", type=float)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--seed", type=int)


def resolve_dataset(args, base: DatasetSpec | None) -> DatasetSpec | None:
    fields = {dst: getattr(args, src) for src, dst in DATA_FLAGS.items() if getattr(args, src) is not None}
    for flag in ("pad_target", "iid"):
        if getattr(args, flag):
            fields[flag] = True
    if args.task:
        if base is not None and base.task == args.task:
            return replace(base, **fields)
        return DatasetSpec(args.task, **fields)
    if base is not None:
        return replace(base, **fields) if fields else base
    return None


def resolve_model(args, base):
    cfg = preset(args.preset) if args.preset else base
    kw = {dst: getattr(args, src) for src, (dst, _) in MODEL_FLAGS.items() if getattr(args, src) is not None}
    if args.copy_decoder is not None:
        kw["copy_decoder"] = args.copy_decoder
    if args.share_layers is not None:
        kw["share_layers"] = args.share_layers
    return replace(cfg, **kw)


def resolve_training(args, base: TrainConfig) -> TrainConfig:
    kw = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k) is not None}
    return replace(base, **kw)


def resolve_experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = None
    dataset = resolve_dataset(args, cfg.dataset if cfg else None)
    train_tsv = args.train_tsv or (cfg.train_tsv if cfg else None)
    test_tsv = args.test_tsv or (cfg.test_tsv if cfg else None)
    if args.train_tsv:
        dataset = None
    if dataset is None and train_tsv is None:
        raise SystemExit("error: give --task, --train-tsv/--test-tsv, or a --config with a dataset")
    model = resolve_model(args, cfg.model if cfg else preset("small-2"))
    training = resolve_training(args, cfg.training if cfg else TrainConfig(
        epochs=dataset.default_epochs if dataset else 2))
    fields = dict(
        name=args.name if args.name is not None else (cfg.name if cfg else ""),
        dataset=dataset, train_tsv=None if dataset else train_tsv, test_tsv=None if dataset else test_tsv,
        tagging=bool(args.tagging) or (cfg.tagging if cfg else False),
        model=model, training=training,
        repetitions=getattr(args, "repetitions", None) or (cfg.repetitions if cfg else 3),
        base_seed=args.seed if args.seed is not None else (cfg.base_seed if cfg else 0),
    )
    label = fields["name"] or model.name
    out = args.output or (cfg.output_dir if cfg else str(Path(default_output_root()) / label))
    return ExperimentConfig(output_dir=out, **fields)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    spec = resolve_dataset(args, None)
    if spec is None:
        raise SystemExit("error: --task is required")
    data = generate(spec)
    for p in write_dataset(data, args.output or default_output_root()):
        print(p)


def cmd_train(args):
    cfg = resolve_experiment(args)
    if args.dry_run:
        print(cfg.to_json(), end="")
        return
    data = load_data(cfg)
    model = Transformer(model_config_for(cfg, data), len(data.vocab), seed=cfg.base_seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, data, cfg.training, seed=cfg.base_seed, log_path=out / "train-log.tsv",
                   checkpoint_dir=out / "checkpoints")
    ckpt = out / "model.pt"
    save_checkpoint(ckpt, model, data.vocab, data.tag_vocabs, extra={"seed": cfg.base_seed})
    print(f"{result.steps} steps, final loss {result.losses[-1]:.4f}; checkpoint {ckpt}")


def cmd_eval(args):
    model, vocab, tag_vocabs, extra = load_checkpoint(args.checkpoint)
    if args.test_tsv:
        data = load_tsv_dataset(args.test_tsv, args.test_tsv, tagging=model.cfg.mode == "tagging")
        examples, name = data.test, data.name
    else:
        spec = resolve_dataset(args, None)
        if spec is None:
            raise SystemExit("error: give --task or --test-tsv")
        examples, name = generate(spec).test, spec.task
    result = evaluate(model, vocab, examples, tag_vocabs, dataset=name,
                      config=extra.get("experiment", model.cfg.name), seed=extra.get("seed", 0))
    print(f"{name}: sequence accuracy {result.sequence_accuracy:.4f} "
          f"({sum(result.correct)}/{len(result.correct)}, {result.truncated} truncated)")
    if args.output:
        result.save(args.output)


def cmd_run(args):
    cfg = resolve_experiment(args)
    if args.dry_run:
        print(cfg.to_json(), end="")
        return
    results = run_experiment(cfg)
    print(f"{cfg.label} on {cfg.dataset_name}: {describe(results)}")
    print(f"summary: {Path(cfg.output_dir) / 'summary.csv'}")


def parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        key = key.replace("-", "_")
        field_name, kind = MODEL_FLAGS.get(key, (key, None))
        if field_name in ("copy_decoder", "share_layers"):
            kind = _bool
        grid[field_name] = [(kind or str)(v) for v in values.split(",")]
    return grid


def cmd_sweep(args):
    base = resolve_experiment(args)
    points = []
    if args.presets:
        for name in args.presets.split(","):
            points.append({"name": name, **preset(name).to_dict()})
    if args.grid:
        points += expand_grid(parse_grid(args.grid))
    if args.dry_run:
        print(base.to_json(), end="")
        print(json.dumps(points, indent=2))
        return
    datasets, rows = sweep(base, points)
    print(markdown_table(datasets, rows), end="")


def cmd_param_count(args):
    model_cfg = resolve_model(args, preset("small-2"))
    if args.vocab_size:
        vocab = args.vocab_size
    else:
        spec = resolve_dataset(args, None) or DatasetSpec("add")
        vocab = len(generate(replace(spec, train_size=min(spec.train_size, 2000),
                                     test_size=min(spec.test_size, 200))).vocab)
    print(parameter_count(Transformer(model_cfg, vocab)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compgen-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write <task>.train.tsv / <task>.test.tsv and a JSON sidecar")
    add_data_flags(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("run", cmd_run, "repeated train + eval with a summary table"),
                                 ("sweep", cmd_sweep, "one experiment per grid point")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="experiment JSON; flags override it")
        p.add_argument("--name")
        p.add_argument("-o", "--output")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        if name != "train":
            p.add_argument("--repetitions", type=int)
        if name == "sweep":
            p.add_argument("--grid", action="append", default=[], help="field=v1,v2 (repeatable)")
            p.add_argument("--presets", help="comma-separated preset names")
        add_data_flags(p)
        add_model_flags(p)
        add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    add_data_flags(p)
    p.add_argument("-o", "--output", help="write the RunResult JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("param-count", help="count trainable parameters")
    add_data_flags(p)
    add_model_flags(p)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
