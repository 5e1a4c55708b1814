import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ltpll.cli import main, run_sweep
from ltpll.datagen import GeneratorConfig, synth_dataset, write_dataset
from ltpll.experiment import build_experiment
from ltpll.metrics import read_metrics_csv


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "toy.json"
    p.write_text(json.dumps({"seed": 1, "train": {"epochs": 3}, "output_dir": str(tmp_path / "runs")}))
    return p


def only_run(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def test_gen_twice_is_byte_identical(tmp_path, cfg_file, capsys):
    for out in ("a", "b"):
        assert main(["gen", "--config", str(cfg_file), "--seed", "1", "--out", str(tmp_path / out)]) == 0
    for name in ("train.jsonl", "train.meta.json", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    row = json.loads((tmp_path / "a" / "train.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "x", "cands"}
    meta = json.loads((tmp_path / "a" / "train.meta.json").read_text())
    assert {"C", "counts", "eta", "cfg", "oracle_labels"} <= set(meta) and meta["cfg"]["seed"] == 1


def test_train_then_eval(tmp_path, cfg_file, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_file), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg_file), "--data", str(data), "--set", "rebalance.kind=records"]) == 0
    run = only_run(tmp_path / "runs")
    assert run.name.endswith("-s1")
    rows = read_metrics_csv(run / "metrics.csv")
    header = (run / "metrics.csv").read_text().splitlines()[0]
    config = json.loads(header[2:])
    assert config["seed"] == 1 and config["rebalance"]["kind"] == "records"
    ckpt = json.loads((run / "checkpoint.json").read_text())
    assert ckpt["config"] == config and ckpt["seed"] == 1

    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--test", str(data / "test.jsonl")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["balanced_top1"] == float(rows[-1]["balanced_top1"])
    assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--test", str(data / "test.jsonl"),
                 "--offset", "none"]) == 0


def test_existing_run_dir_needs_force(cfg_file):
    assert main(["train", "--config", str(cfg_file)]) == 0
    assert main(["train", "--config", str(cfg_file)]) == 4
    assert main(["train", "--config", str(cfg_file), "--force"]) == 0


def test_flag_overrides_file(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file), "--seed", "5", "--set", "train.epochs=2"]) == 0
    run = only_run(tmp_path / "runs")
    assert run.name.endswith("-s5")
    assert [r["epoch"] for r in read_metrics_csv(run / "metrics.csv")] == ["1", "2"]


def test_bound_command(capsys):
    assert main(["bound", "--N", "1630", "--C", "4", "--dH", "5", "--eta", "0.6", "--delta", "0.05"]) == 0
    out = json.loads(capsys.readouterr().out)
    expect = 4 / ((math.log(2) - math.log(1.6)) * 1630) * (5 * (math.log(3260) + 2 * math.log(4)) - math.log(0.05) + math.log(2))
    assert out["epsilon"] == pytest.approx(expect, rel=1e-14)
    assert out["inputs"]["eta"] == 0.6
    assert main(["bound", "--N", "10", "--C", "4", "--dH", "5", "--eta", "1.0", "--delta", "0.05"]) == 2


@pytest.mark.parametrize("argv, field", [
    (["--set", "train.epochs=0"], "train"),
    (["--set", "generator.C=5"], "generator"),
    (["--set", "strategy.strategy=FOO"], "strategy"),
    (["--set", "train.bogus=1"], "train"),
    (["--set", "rebalance.kind=nope"], "rebalance"),
])
def test_config_errors_exit_2(cfg_file, capsys, argv, field):
    assert main(["train", "--config", str(cfg_file), *argv]) == 2
    assert field in capsys.readouterr().err


def test_missing_seed_is_config_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{}")
    assert main(["train", "--config", str(p)]) == 2
    assert "seed" in capsys.readouterr().err


def test_missing_files_exit_4(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 4
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--test", "x"]) == 4


def test_divergence_exits_3(tmp_path, cfg_file):
    train, test = synth_dataset(GeneratorConfig.toy(seed=1))
    write_dataset(replace(train, features=train.features * 1e308), test, tmp_path / "huge")
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg_file), "--data", str(tmp_path / "huge"), "--set", "model.init_gain=50"])
    assert code == 3


def test_sweep_summary(tmp_path, cfg_file, capsys):
    grid = json.dumps({"rebalance.kind": ["none", "oracle_la", "records"]})
    assert main(["sweep", "--config", str(cfg_file), "--grid", grid, "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "summary.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert [r["rebalance.kind"] for r in rows] == ["none", "oracle_la", "records"]
    assert all(0 <= float(r["balanced_top1"]) <= 1 for r in rows)


def test_sweep_order_insensitive(tmp_path):
    base = {"seed": 0, "train": {"epochs": 2}}
    grid_a = {"train.records_m": [0.0, 0.9, 1.0]}
    grid_b = {"train.records_m": [1.0, 0.0, 0.9]}
    run_sweep(base, grid_a, tmp_path / "a", seeds=[0, 1])
    run_sweep(base, grid_b, tmp_path / "b", seeds=[1, 0], jobs=2)
    runs_a = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    runs_b = sorted(p.name for p in (tmp_path / "b").iterdir() if p.is_dir())
    assert runs_a == runs_b and len(runs_a) == 6
    for name in runs_a:
        for f in ("metrics.csv", "checkpoint.json", "config.json"):
            assert (tmp_path / "a" / name / f).read_bytes() == (tmp_path / "b" / name / f).read_bytes()


def test_run_name_ignores_output_dir():
    a = build_experiment({"seed": 3, "output_dir": "x"})
    b = build_experiment({"seed": 3, "output_dir": "y"})
    assert a.run_name() == b.run_name() and a.run_name().endswith("-s3")
