import json
import os
import statistics
from dataclasses import replace

import pytest

from compgen.data import DatasetSpec
from compgen.evaluation import RunResult, aggregate
from compgen.experiment import ExperimentConfig, expand_grid, run_experiment, sweep
from compgen.model import ENCODINGS, ModelConfig, preset
from compgen.training import TrainConfig

TINY_MODEL = ModelConfig(encoding="rel-e", num_layers=1, d_model=8, d_ff=16, heads=2, radius=4, max_len=8)
TINY_DATA = DatasetSpec("reverse", train_size=24, test_size=6, train_len_range=(1, 3), test_len_range=(4, 5))


def tiny_config(out, **kw):
    base = dict(dataset=TINY_DATA, model=TINY_MODEL, training=TrainConfig(epochs=1, batch_size=8, warmup=10),
                repetitions=3, base_seed=5, output_dir=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, name="x")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert ExperimentConfig.load(path) == cfg
    tsv = ExperimentConfig(train_tsv="a.train.tsv", test_tsv="a.test.tsv", tagging=True, output_dir="o")
    assert ExperimentConfig.from_dict(json.loads(tsv.to_json())) == tsv
    assert tsv.dataset_name == "a"


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(dataset=TINY_DATA, repetitions=0)
    with pytest.raises(ValueError):
        ExperimentConfig()
    with pytest.raises(ValueError):
        ExperimentConfig(dataset=TINY_DATA, train_tsv="a.tsv", test_tsv="b.tsv")


def test_run_writes_one_result_per_repetition(tmp_path):
    results = run_experiment(tiny_config(tmp_path))
    assert [r.seed for r in results] == [5, 6, 7]
    assert sorted(p.name for p in (tmp_path / "results").iterdir()) == ["run-0.json", "run-1.json", "run-2.json"]
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == ["summary.csv"]
    assert RunResult.load(tmp_path / "results" / "run-1.json") == results[1]
    header, row = (tmp_path / "summary.csv").read_text().splitlines()
    assert header == "config,reverse,Avg"
    cells = row.split(",")
    assert cells[0] == TINY_MODEL.name
    assert float(cells[1]) == pytest.approx(aggregate(results).mean, abs=1e-6)
    assert ExperimentConfig.load(tmp_path / "config.json") == tiny_config(tmp_path)


def test_rerun_is_identical(tmp_path):
    run_experiment(tiny_config(tmp_path / "a", repetitions=1))
    run_experiment(tiny_config(tmp_path / "b", repetitions=1))
    for rel in ("summary.csv", "results/run-0.json", "checkpoints/run-0.pt", "logs/run-0.tsv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output_fails_before_training(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(OSError):
        run_experiment(tiny_config(locked / "out"))


def test_output_under_a_file_fails_before_training(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="not writable"):
        run_experiment(tiny_config(blocker / "out"))
    assert blocker.read_text() == ""


def test_expand_grid():
    assert expand_grid({"a": [1, 2], "b": ["x"]}) == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]


def test_sweep_of_seven_encodings(tmp_path):
    base = tiny_config(tmp_path, repetitions=1)
    datasets, rows = sweep(base, expand_grid({"encoding": list(ENCODINGS)}))
    assert datasets == ["reverse"] and len(rows) == 7
    assert {r["config"] for r in rows} == {replace_name(e) for e in ENCODINGS}
    avgs = [r["Avg"] for r in rows]
    assert avgs == sorted(avgs, reverse=True)
    for r in rows:
        assert r["Avg"] == statistics.fmean([r["reverse"]])
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert len(lines) == 8
    assert (tmp_path / "comparison.md").exists()


def replace_name(encoding):
    return replace(TINY_MODEL, encoding=encoding).name


def test_sweep_rejects_duplicate_names_and_empty_grid(tmp_path):
    base = tiny_config(tmp_path, repetitions=1)
    with pytest.raises(ValueError, match="duplicate"):
        sweep(base, [{"encoding": "abs", "name": "same"}, {"encoding": "rel-e", "name": "same"}])
    with pytest.raises(ValueError):
        sweep(base, [])
    assert not any(tmp_path.iterdir())


@pytest.mark.parametrize("name,dims", [
    ("small-2", (64, 256, 4, 2)), ("small-4", (64, 256, 4, 4)), ("small-6", (64, 256, 4, 6)),
    ("large-2", (128, 512, 8, 2)), ("large-4", (128, 512, 8, 4)), ("large-6", (128, 512, 8, 6)),
])
def test_size_presets(name, dims):
    cfg = preset(name)
    assert (cfg.d_model, cfg.d_ff, cfg.heads, cfg.num_layers) == dims
    assert not cfg.share_layers
    shared = preset(name + "s")
    assert shared.share_layers and (shared.d_model, shared.num_layers) == (dims[0], dims[3])
