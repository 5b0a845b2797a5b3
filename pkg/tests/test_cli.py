import json
from importlib import resources

import pytest

from eosfm.cli import SUBCOMMANDS, main, parse_ks

DATA = resources.files("eosfm") / "data"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Two tiny specialists, a downstream dataset and an ensemble built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    common = ["--n", "20", "--num-classes", "3", "--ms-twins", "1"]
    assert main(["gen-data", "--task", "segmentation", "--modality", "ms", "--seed", "1", "--out", str(root / "up_ms"), *common]) == 0
    assert main(["gen-data", "--task", "segmentation", "--modality", "sar", "--seed", "2", "--out", str(root / "up_sar"), *common]) == 0
    assert main(["gen-data", "--task", "segmentation", "--modality", "ms+sar", "--seed", "3", "--out", str(root / "down"), *common]) == 0
    for mod in ("ms", "sar"):
        rc = main(["train-specialist", "--dataset", str(root / f"up_{mod}"), "--task", "segmentation",
                   "--max-epochs", "1", "--patience", "1", "--encoder-id", mod, "--out", str(root / f"enc_{mod}"),
                   "--register-into", str(root / "reg")])
        assert rc == 0
    assert main(["build-ensemble", "--registry", str(root / "reg"), "--dataset", str(root / "down"),
                 "--out", str(root / "ens")]) == 0
    return root


def test_help_for_every_subcommand(capsys):
    for cmd in SUBCOMMANDS:
        assert main([cmd, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--json-summary" in out


def test_usage_errors(capsys, tmp_path):
    assert main(["frobnicate"]) == 2
    assert main(["bench-dtb", "--out", str(tmp_path), "--bogus"]) == 2
    assert main(["bench-dtb", "--in", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "argument --in" in err and "nope.csv" in err


def test_runtime_error_exit_1(pipeline, tmp_path):
    rc = main(["finetune", "--ensemble", str(pipeline / "ens"), "--dataset", str(pipeline / "down"),
               "--task", "regression", "--epochs", "1", "--out", str(tmp_path / "ft")])
    assert rc == 1


def test_bench_dtb(tmp_path):
    assert main(["bench-dtb", "--in", str(DATA / "table2.csv"), "--out", str(tmp_path)]) == 0
    first = (tmp_path / "dtb.csv").read_text().splitlines()[1].split(",")
    assert first[1] == "EoS-FM (72 M)" and abs(float(first[2]) - 3.81) <= 0.02


def test_aggregate_runs(tmp_path):
    assert main(["aggregate-runs", "--in", str(DATA / "suppl_table1_runs.csv"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "aggregate.csv").read_text().splitlines()
    assert lines[0] == "dataset,n,mean,std" and lines[1] == "HLS Burn Scars,3,80.73,1.07"


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"in": str(DATA / "table3.csv"), "out": str(tmp_path / "from_config")}))
    assert main(["bench-dtb", "--config", str(cfg)]) == 0
    assert (tmp_path / "from_config" / "dtb.csv").exists()
    assert main(["bench-dtb", "--config", str(cfg), "--out", str(tmp_path / "from_flag")]) == 0
    assert (tmp_path / "from_flag" / "dtb.csv").exists()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["bench-dtb", "--config", str(cfg)]) == 2


def test_json_summary(tmp_path):
    summary = tmp_path / "s.json"
    assert main(["aggregate-runs", "--in", str(DATA / "suppl_table1_runs.csv"), "--out", str(tmp_path),
                 "--seed", "3", "--json-summary", str(summary)]) == 0
    data = json.loads(summary.read_text())
    assert data["command"] == "aggregate-runs" and data["seed"] == 3
    assert data["outputs"] == [str(tmp_path / "aggregate.csv")]
    assert "inp" in data["inputs"] and data["wall_time_s"] >= 0


def test_finetune_prune_finetune(pipeline, tmp_path):
    ft = tmp_path / "ft"
    assert main(["finetune", "--ensemble", str(pipeline / "ens"), "--dataset", str(pipeline / "down"),
                 "--task", "segmentation", "--epochs", "2", "--out", str(ft)]) == 0
    assert {p.name for p in ft.iterdir()} >= {"model", "history.csv", "result.csv"}
    assert (ft / "result.csv").read_text().startswith("model,dataset,metric,direction,score,seed\n")
    assert main(["prune", "--model", str(ft / "model"), "--k", "1", "--out", str(tmp_path / "small")]) == 0
    assert main(["finetune", "--ensemble", str(tmp_path / "small"), "--dataset", str(pipeline / "down"),
                 "--task", "segmentation", "--epochs", "1", "--out", str(tmp_path / "ft2")]) == 0
    assert main(["prune", "--model", str(ft / "model"), "--k", "1", "--refinetune", "--dataset",
                 str(pipeline / "down"), "--epochs", "1", "--out", str(tmp_path / "small2")]) == 0
    assert main(["prune", "--model", str(ft / "model"), "--k", "1", "--refinetune",
                 "--out", str(tmp_path / "small3")]) == 1


def test_variance_and_sweep(pipeline, tmp_path):
    assert main(["variance-report", "--ensemble", str(pipeline / "ens"), "--dataset", str(pipeline / "down"),
                 "--n-batches", "1", "--out", str(tmp_path / "var")]) == 0
    assert (tmp_path / "var" / "variance.csv").read_text().splitlines()[0] == "encoder_id,variance"
    assert main(["scaling-sweep", "--registry", str(pipeline / "reg"), "--dataset", str(pipeline / "down"),
                 "--ks", "1..N", "--seeds", "0", "--epochs", "1", "--out", str(tmp_path / "sw")]) == 0
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 3


def test_parse_ks():
    assert parse_ks("1..N", 4) == [1, 2, 3, 4]
    assert parse_ks("2..3", 9) == [2, 3]
    assert parse_ks("1,3", 9) == [1, 3]
