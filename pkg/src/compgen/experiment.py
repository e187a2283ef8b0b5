"""Repeated train/evaluate runs and config sweeps."""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from compgen.data import Dataset, DatasetSpec, generate, load_tsv_dataset
from compgen.evaluation import (
    RunResult,
    aggregate,
    evaluate,
    markdown_table,
    summary_rows,
    write_summary_csv,
)
from compgen.model import ModelConfig, Transformer, save_checkpoint
from compgen.training import TrainConfig, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "COMPGEN_OUTPUT"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class ExperimentConfig:
    name: str = ""
    dataset: DatasetSpec | None = None
    train_tsv: str | None = None
    test_tsv: str | None = None
    tagging: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    repetitions: int = 3
    base_seed: int = 0
    output_dir: str = field(default_factory=default_output_root)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if (self.dataset is None) == (self.train_tsv is None):
            raise ValueError("give exactly one of a dataset spec or TSV paths")
        if self.train_tsv is not None and self.test_tsv is None:
            raise ValueError("test_tsv is required with train_tsv")

    @property
    def label(self) -> str:
        return self.name or self.model.name

    @property
    def dataset_name(self) -> str:
        if self.dataset is not None:
            return self.dataset.task
        return Path(self.train_tsv).name.split(".")[0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict() if self.dataset else None,
            "train_tsv": self.train_tsv,
            "test_tsv": self.test_tsv,
            "tagging": self.tagging,
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("dataset") is not None:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["training"] = TrainConfig.from_dict(d.get("training", {}))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is not None:
        return generate(cfg.dataset)
    return load_tsv_dataset(cfg.train_tsv, cfg.test_tsv, tagging=cfg.tagging)


def _ensure_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory {path} is not writable: {err}") from err


def model_config_for(cfg: ExperimentConfig, data: Dataset) -> ModelConfig:
    mcfg = cfg.model
    if data.tagging:
        mcfg = replace(mcfg, mode="tagging", tag_sizes=tuple(len(v) for v in data.tag_vocabs))
    return mcfg


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None) -> list[RunResult]:
    """Train and evaluate ``cfg.repetitions`` times with seeds base_seed + r.

    Writes ``results/run-<r>.json``, ``checkpoints/run-<r>.pt``,
    ``logs/run-<r>.tsv`` and a ``summary.csv`` (rows = configs, columns = datasets, then Avg).
    """
    out = Path(cfg.output_dir)
    _ensure_writable(out)
    for sub in ("results", "checkpoints", "logs"):
        _ensure_writable(out / sub)
    (out / "config.json").write_text(cfg.to_json())
    data = data or load_data(cfg)
    mcfg = model_config_for(cfg, data)
    results = []
    for r in range(cfg.repetitions):
        seed = cfg.base_seed + r
        model = Transformer(mcfg, len(data.vocab), seed=seed)
        log.info("%s on %s, seed %d", cfg.label, cfg.dataset_name, seed)
        train(model, data, cfg.training, seed=seed, log_path=out / "logs" / f"run-{r}.tsv",
              checkpoint_dir=out / "checkpoints" / f"run-{r}")
        save_checkpoint(out / "checkpoints" / f"run-{r}.pt", model, data.vocab, data.tag_vocabs,
                        extra={"seed": seed, "experiment": cfg.label})
        result = evaluate(model, data.vocab, data.test, data.tag_vocabs,
                          dataset=cfg.dataset_name, config=cfg.label, seed=seed)
        result.save(out / "results" / f"run-{r}.json")
        log.info("seed %d: sequence accuracy %.4f", seed, result.sequence_accuracy)
        results.append(result)
    datasets, rows = summary_rows(results)
    write_summary_csv(out / "summary.csv", datasets, rows)
    return results


def expand_grid(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of ``{field: [values]}``."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(base: ExperimentConfig, points: list[dict], data: Dataset | None = None):
    """One experiment per grid point; returns ``(datasets, rows)`` sorted by Avg.

    A point is a dict of ModelConfig overrides plus an optional ``name``.
    """
    if not points:
        raise ValueError("empty sweep grid")
    configs = []
    for point in points:
        point = dict(point)
        name = point.pop("name", None)
        mcfg = replace(base.model, **point)
        name = name or mcfg.name
        configs.append(replace(base, name=name, model=mcfg,
                               output_dir=str(Path(base.output_dir) / name)))
    names = [c.name for c in configs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValueError(f"duplicate config names in sweep: {dupes}")
    _ensure_writable(Path(base.output_dir))
    data = data or load_data(base)
    results = []
    for cfg in configs:
        results += run_experiment(cfg, data)
    datasets, rows = summary_rows(results)
    rows.sort(key=lambda row: -row["Avg"])
    out = Path(base.output_dir)
    write_summary_csv(out / "comparison.csv", datasets, rows)
    (out / "comparison.md").write_text(markdown_table(datasets, rows))
    return datasets, rows


def describe(results: list[RunResult]) -> str:
    agg = aggregate(results)
    accs = ", ".join(f"{r.sequence_accuracy:.3f}" for r in results)
    return f"mean {agg.mean:.3f}  max {agg.max:.3f}  std {agg.stddev:.3f}  [{accs}]"
