import csv
import json

import pytest

from stps.cli import main
from stps.dataio import SensingPartition, load_traffic_table

SYN = ["--synthetic", "n=6", "days=3", "seed=1"]
TINY = ["--l", "4", "--l-prime", "8", "--d", "4", "--epochs", "1", "--batch", "256"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", *SYN, "--m-prime", "2", *TINY, "--out", str(out)]) == 0
    return out


def test_synth_writes_files(tmp_path):
    assert main(["synth", "--synthetic", "n=7", "days=2", "--out", str(tmp_path)]) == 0
    t = load_traffic_table(tmp_path / "data.csv")
    assert t.n_locations == 7 and t.n_intervals == 576
    assert (tmp_path / "adjacency.csv").read_text()


def test_select_deterministic(tmp_path):
    main(["synth", *SYN, "--out", str(tmp_path)])
    files = ["--data", str(tmp_path / "data.csv"), "--adjacency", str(tmp_path / "adjacency.csv")]
    for sub in ("a", "b"):
        assert main(["select", *files, "--m-prime", "2", "--seed", "7", "--out", str(tmp_path / sub)]) == 0
    a = (tmp_path / "a" / "partition.txt").read_text()
    assert a == (tmp_path / "b" / "partition.txt").read_text()
    assert len(SensingPartition.load(tmp_path / "a" / "partition.txt").unsensed) == 2


def test_train_outputs(trained):
    assert (trained / "model.ckpt").is_file()
    rows = list(csv.DictReader((trained / "losses.csv").open()))
    assert {r["stage"] for r in rows} == {"1", "2", "3"}
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["command"] == "train" and cfg["d"] == 4 and cfg["synthetic"]["n"] == 6


def test_one_step_ablation(tmp_path):
    assert main(["train", *SYN, "--m-prime", "2", *TINY, "--ablation", "one-step",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "losses.csv").open()))
    assert {r["stage"] for r in rows} == {"1"}


def test_evaluate_twice_identical(trained, tmp_path):
    args = ["evaluate", *SYN, "--checkpoint", str(trained / "model.ckpt"), "--svg"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("report.csv", "slices.csv", "rmse.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader((tmp_path / "a" / "report.csv").open()))
    assert len(rows) == 1 + 8 + 1 and rows[-1][0] == "avg"


def test_evaluate_compare_bins(trained, tmp_path):
    ck = str(trained / "model.ckpt")
    assert main(["evaluate", *SYN, "--checkpoint", ck, "--compare", ck, "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "bins.csv").open()))
    assert len(rows) == 21 and all(float(r[1]) == 0.0 for r in rows[1:])


def test_forecast_shape(trained, tmp_path):
    assert main(["forecast", *SYN, "--checkpoint", str(trained / "model.ckpt"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "forecast.csv").open()))
    assert len(rows) == 1 + 2 and all(len(r) == 8 for r in rows)
    assert rows[0][0] == "2024-01-04T00:00:00"


def test_echoed_config_reproduces_run(trained, tmp_path):
    cfg = json.loads((trained / "config.json").read_text())
    cfg["out"] = str(tmp_path)
    (tmp_path / "in.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "in.json")]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_flags_override_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"d": 8, "epochs": 1}))
    assert main(["train", *SYN, "--m-prime", "2", "--l", "4", "--l-prime", "8", "--batch", "256",
                 "--config", str(tmp_path / "c.json"), "--d", "2", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["d"] == 2


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "/nonexistent.csv", "--adjacency", "/nonexistent.csv", "--m-prime", "2"], 2),
    (["train", *SYN], 1),
    (["train", *SYN, "--m-prime", "9"], 1),
    (["train", *SYN, "--m-prime", "2", "--alpha", "3"], 1),
    (["bogus"], 1),
    (["train", "--synthetic", "size=3"], 1),
    (["evaluate", *SYN, "--checkpoint", "/nonexistent.ckpt"], 2),
])
def test_exit_codes(argv, code, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == code


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"depth": 3}))
    assert main(["train", *SYN, "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exits_numeric(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"lr": 1e300, "epochs": 2}))
    code = main(["train", *SYN, "--m-prime", "2", "--l", "4", "--l-prime", "8", "--d", "4",
                 "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)])
    assert code == 3
