import csv
import json

import pytest

from clusterlab.cli import main
from clusterlab.network import load_checkpoint

SMALL = {
    "plan": {"dims": [16, 12, 8, 4], "k": 2, "epochs": 10, "batch_size": 16, "lr": 0.01, "eval_every": 5},
    "synthetic": {"n_classes": 4, "per_class_train": 60, "per_class_test": 20, "seed": 3},
}


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("CLUSTERLAB_OUT", raising=False)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "plan.json", SMALL)
    assert main(["train", "--config", cfg, "--out", str(root / "clustered")]) == 0
    assert main(["train", "--config", cfg, "--out", str(root / "plain"), "--lambda", "0"]) == 0
    return root


def test_train_outputs(trained):
    out = trained / "clustered"
    assert (out / "checkpoint.json").exists()
    rows = read_csv(out / "history.csv")
    assert rows[0] == [
        "step", "ce_loss", "eff_loss", "clusterability_layer0", "clusterability_layer1", "train_acc", "test_acc",
    ]
    assert len(rows) > 2
    _, meta = load_checkpoint(out / "checkpoint.json")
    assert meta["plan"]["k"] == 2
    assert all(t.step_count > 0 for t in meta["grad_traces"])


def test_lambda_defaults_to_20(trained):
    _, meta = load_checkpoint(trained / "clustered" / "checkpoint.json")
    assert meta["plan"]["lam"] == 20.0
    _, meta = load_checkpoint(trained / "plain" / "checkpoint.json")
    assert meta["plan"]["lam"] == 0.0


def test_train_k0_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--k", "0"]) == 2
    assert "k" in capsys.readouterr().err


@pytest.mark.parametrize(
    "cfg",
    [
        {"plan": {"lambda": 3}},
        {"colour": 1},
        {"dataset": "cifar"},
        {"dataset": "mnist", "mnist_dir": "/nonexistent"},
    ],
)
def test_train_bad_config_exit_2(tmp_path, cfg):
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_train_missing_config_and_out(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", write_config(tmp_path / "c.json", SMALL)]) == 2


def test_env_overrides_out(tmp_path, monkeypatch):
    cfg = dict(SMALL, plan=dict(SMALL["plan"], epochs=1))
    monkeypatch.setenv("CLUSTERLAB_OUT", str(tmp_path / "env"))
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "history.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_bsgc_schema_and_baseline(trained, tmp_path):
    ck = str(trained / "plain" / "checkpoint.json")
    assert main(["bsgc", ck, "--out", str(tmp_path / "w"), "--ks", "2,3,4"]) == 0
    assert main(["bsgc", ck, "--out", str(tmp_path / "g"), "--ks", "2,3,4", "--source", "gradient"]) == 0
    w = read_csv(tmp_path / "w" / "clusterability-vs-k.csv")
    g = read_csv(tmp_path / "g" / "clusterability-vs-k.csv")
    assert w[0] == g[0] == ["layer", "k", "source", "clusterability", "baseline"]
    assert len(w) == len(g) == 1 + 2 * 3
    for row in w[1:]:
        assert float(row[4]) == 1.0 / int(row[1])
        assert 0.0 <= float(row[3]) <= 1.0
    clusters = json.loads((tmp_path / "w" / "clusters.json").read_text())
    assert set(clusters["layers"]) == {"0", "1"}


def test_bsgc_missing_trace_exit_2(trained, tmp_path):
    doc = json.loads((trained / "plain" / "checkpoint.json").read_text())
    doc["grad_traces"] = None
    ck = tmp_path / "notrace.json"
    ck.write_text(json.dumps(doc))
    assert main(["bsgc", str(ck), "--out", str(tmp_path / "o"), "--source", "gradient"]) == 2


def test_bsgc_bad_checkpoint_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["bsgc", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["bsgc", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def analyze(ck, out, *extra):
    return main(["analyze", ck, "--out", str(out), "--interventions", "--sufficiency", "--heatmap",
                 "--null-dependency", "--ecs", *extra])


def test_analyze_reports(trained, tmp_path):
    ck = str(trained / "clustered" / "checkpoint.json")
    assert analyze(ck, tmp_path / "a") == 0
    heat = read_csv(tmp_path / "a" / "heatmap.csv")
    assert heat[0] == ["row", "col", "weight", "same_module"]
    assert len(heat) - 1 == 12 * 8  # layer 1 by default
    inter = read_csv(tmp_path / "a" / "interventions.csv")
    assert inter[0] == ["mode", "layer", "cluster", "class", "accuracy"]
    assert len(inter) - 1 == 2 * 2 * 2 * 4
    suff = read_csv(tmp_path / "a" / "sufficiency.csv")
    assert [r[0] for r in suff[1:]] == ["0", "1", "2"]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert sum(int(r[2]) for r in suff[1:]) == summary["eligible_count"]
    ecs = read_csv(tmp_path / "a" / "ecs.csv")
    assert ecs[0] == ["label", "ecs", "nonzero", "total"] and len(ecs) == 5


def test_analyze_byte_identical(trained, tmp_path):
    ck = str(trained / "clustered" / "checkpoint.json")
    assert analyze(ck, tmp_path / "a") == 0
    assert analyze(ck, tmp_path / "b") == 0
    for name in ("heatmap.csv", "interventions.csv", "sufficiency.csv", "ecs.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_analyze_compare(trained, tmp_path):
    ck = str(trained / "clustered" / "checkpoint.json")
    other = str(trained / "plain" / "checkpoint.json")
    assert main(["analyze", ck, "--out", str(tmp_path), "--ecs", "--compare", other]) == 0
    rows = read_csv(tmp_path / "ecs_compare.csv")
    assert rows[0] == ["label", "pct_increase"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]


def test_analyze_unclustered_exit_2(tmp_path):
    cfg = dict(SMALL, plan=dict(SMALL["plan"], clustered_layers=[], epochs=1))
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "m")]) == 0
    assert main(["analyze", str(tmp_path / "m" / "checkpoint.json"), "--out", str(tmp_path / "a"),
                 "--interventions"]) == 2


def test_theory_rows(tmp_path):
    assert main(["theory", "--out", str(tmp_path), "--dense", "64,64", "--jl", "100:0.5",
                 "--modular", "4:2,2", "--capacity", "16,16,16,16"]) == 0
    rows = read_csv(tmp_path / "theory.csv")
    assert rows[0] == ["calculator", "inputs", "quantity", "value"]
    table = {(r[0], r[1], r[2]): r[3] for r in rows[1:]}
    assert float(table[("polytope_dense", "64,64", "log2")]) == 128.0
    assert table[("polytope_dense", "64,64", "exact")] == str(2**128)
    assert table[("jl_capacity", "100:0.5", "exact")] == "22"
    assert table[("polytope_pair_modular", "4:2,2", "exact")] == "128"
    assert table[("polytope_pair_dense", "4:2,2", "exact")] == "256"


@pytest.mark.parametrize("bad", [["--modular", "4:2,x"], ["--modular", "4"], ["--modular", "4:0,2"],
                                 ["--jl", "100:1.5"], ["--capacity", ""]])
def test_theory_malformed_exit_2(tmp_path, bad):
    assert main(["theory", "--out", str(tmp_path), *bad]) == 2


def test_sweep_command(trained, tmp_path):
    ck = str(trained / "plain" / "checkpoint.json")
    assert main(["sweep-max-clusterability", ck, "--out", str(tmp_path), "--layer", "0", "--lambda", "20"]) == 0
    rows = read_csv(tmp_path / "max_clusterability.csv")
    assert rows[0] == ["layer", "k", "lambda", "baseline_accuracy", "max_clusterability"]
    assert 0.0 <= float(rows[1][4]) <= 1.0


def test_unknown_command_exit_2():
    assert main(["frobnicate"]) == 2
