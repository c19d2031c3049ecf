import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from flatgraph import cli
from flatgraph.datasets import synthetic_citation_graph, write_dataset
from flatgraph.flatmin import MethodConfig
from flatgraph.models import ModelConfig

CONFIG_DIR = Path(str(resources.files("flatgraph") / "configs"))
SHIPPED = sorted(p.relative_to(CONFIG_DIR).as_posix() for p in CONFIG_DIR.rglob("*.json"))


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    g = synthetic_citation_graph((60, 55, 65), num_features=60, words_per_vertex=10, seed=4)
    write_dataset(g, root / "toy")
    return root


def make_config(path, data_root, out, method=None, split=None, mode="transductive", **model):
    cfg = {
        "name": path.stem,
        "dataset": str(data_root / "toy"),
        "split": split or {"kind": "ra_pl", "seed": 0},
        "mode": mode,
        "model": {"arch": "gcn", "hidden_dim": 16, "model_dropout": 0.5, **model},
        "method": method or {},
        "optimizer": {"lr": 0.01, "weight_decay": 5e-4},
        "training": {"patience": 10, "max_epochs": 60},
        "seeds": "0..2",
        "output": str(out),
    }
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- split ------------------------------------------------------------------------------


def test_split_prints_sizes_and_is_idempotent(data_root, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("split", "--dataset", data_root / "toy", "--kind", "ra-pl", "--seed", 0, "--out", a) == 0
    assert capsys.readouterr().out.strip() == "60 90 30"
    assert run("split", "--dataset", data_root / "toy", "--kind", "ra-pl", "--seed", 0, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_split_uses_data_env(data_root, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLATGRAPH_DATA", str(data_root))
    assert run("split", "--dataset", "toy", "--kind", "622", "--out", tmp_path / "s.json") == 0
    assert capsys.readouterr().out.split() == ["108", "36", "36"]


def test_split_errors(tmp_path, monkeypatch):
    monkeypatch.delenv("FLATGRAPH_DATA", raising=False)
    assert run("split", "--dataset", tmp_path / "none", "--kind", "622", "--out", tmp_path / "s.json") == 3
    with pytest.raises(SystemExit) as exc:
        run("split", "--dataset", tmp_path, "--kind", "bogus", "--out", tmp_path / "s.json")
    assert exc.value.code == 2


# -- config validation -----------------------------------------------------------------


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_validate(name):
    cfg = cli.read_config(CONFIG_DIR / name)
    rc = cli.run_config(cfg)
    assert rc.patience == 100 and rc.max_epochs == 20000
    assert Path(name).stem == cfg["name"]
    assert cfg["mode"] == ("inductive" if name.startswith("inductive/") else "transductive")


def test_shipped_config_spot_values():
    def load(name):
        return cli.read_config(CONFIG_DIR / name)

    gcn = load("gcn_cora_planetoid.json")
    assert (gcn["model"]["hidden_dim"], gcn["model"]["model_dropout"], gcn["model"]["input_dropout"]) == (128, 0.8, 0.15)
    assert gcn["optimizer"] == {"lr": 0.01, "weight_decay": 0.1}
    assert load("gcn_citeseer_ra_pl_sam.json")["method"] == {"sam.rho": 1.0}
    assert load("gcn_cora_planetoid_asam.json")["method"] == {"asam.rho": 10.0}
    assert load("gcn_cora_ra_pl_anti_pgd.json")["method"] == {"anti_pgd.sigma": 0.3, "anti_pgd.stop_epoch": 50}
    mlp = load("graphmlp_cora_planetoid.json")["model"]
    assert (mlp["nc_layer"], mlp["nc_weight"], mlp["tau"], mlp["r"]) == (-3, 30.0, 0.5, 3)
    combo = MethodConfig.from_flat(load("gcn_citeseer_ra_pl_ewa_gasam.json")["method"])
    assert combo.label() == "ewa+gasam" and combo.rho == 20.0 and combo.ewa_alpha == 0.99
    assert load("gcn_pubmed_622.json")["model"]["norm"] == "ln"


def test_no_desk_excluded_configs():
    assert not any("arxiv" in n or "ppi" in n for n in SHIPPED)


def test_schema_violation_points_at_key(tmp_path, data_root, capsys):
    p = make_config(tmp_path / "c.json", data_root, tmp_path / "out")
    cfg = json.loads(p.read_text())
    cfg["model"]["dropout"] = 0.3
    p.write_text(json.dumps(cfg))
    assert run("train", "--config", p) == 2
    assert "/model" in capsys.readouterr().err
    cfg["model"].pop("dropout")
    cfg["method"] = {"sam.rho": 1.0, "asam.rho": 1.0}
    p.write_text(json.dumps(cfg))
    assert run("train", "--config", p) == 2


def test_parse_seeds():
    assert cli.parse_seeds("5..5") == [5]
    assert cli.parse_seeds("0..3") == [0, 1, 2, 3]
    assert cli.parse_seeds("1,4") == [1, 4]
    assert cli.parse_seeds([2, 3]) == [2, 3]


# -- train / landscape / report ------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(data_root, tmp_path_factory):
    d = tmp_path_factory.mktemp("runs")
    cfg = make_config(d / "gcn_toy.json", data_root, d / "base")
    assert run("train", "--config", cfg, "--jobs", 1) == 0
    return d, cfg


def test_train_outputs(trained):
    d, _ = trained
    lines = (d / "base" / "results.jsonl").read_text().splitlines()
    assert [json.loads(x)["seed"] for x in lines] == [0, 1, 2]
    summary = json.loads((d / "base" / "summary.json").read_text())
    assert {"mean", "sd", "n", "failed"} <= set(summary) and summary["n"] == 3 and summary["failed"] == []
    assert (d / "base" / "checkpoints" / "seed_0.f64").is_file()


def test_train_single_seed_and_self_baseline(trained, tmp_path):
    d, cfg = trained
    assert run("train", "--config", cfg, "--seeds", "1..1", "--out", tmp_path / "one", "--baseline", d / "base",
               "--jobs", 1) == 0
    assert len((tmp_path / "one" / "results.jsonl").read_text().splitlines()) == 1
    paired = json.loads((tmp_path / "one" / "summary.json").read_text())["paired"]
    assert paired["n"] == 1 and paired["mean"] == 0.0


def test_train_is_idempotent(trained, tmp_path):
    d, cfg = trained
    assert run("train", "--config", cfg, "--out", tmp_path / "again", "--jobs", 2) == 0
    for f in ("results.jsonl", "summary.json", "checkpoints/seed_2.f64"):
        assert (tmp_path / "again" / f).read_bytes() == (d / "base" / f).read_bytes()


def test_train_numeric_failure_exit_code(trained, tmp_path, monkeypatch):
    from flatgraph import trainer
    from flatgraph.tensor import NumericError

    def broken(*a):
        raise NumericError("diverged")

    monkeypatch.setattr(trainer, "_attempt", broken)
    _, cfg = trained
    assert run("train", "--config", cfg, "--seeds", "0..0", "--out", tmp_path / "bad", "--jobs", 1) == 4
    line = json.loads((tmp_path / "bad" / "results.jsonl").read_text())
    assert line["failed"] and len(line["retries"]) == 4


def test_landscape_grid_and_origin(trained, tmp_path):
    d, cfg = trained
    out = tmp_path / "surf.csv"
    ckpt = d / "base" / "checkpoints" / "seed_0.json"
    assert run("landscape", "--checkpoint", ckpt, "--config", cfg, "--grid", 3, "--range=-1:1", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "a,b,loss_train,loss_test" and len(lines) == 10
    rows = [dict(zip(lines[0].split(","), map(float, x.split(",")))) for x in lines[1:]]
    origin = [r for r in rows if r["a"] == 0 and r["b"] == 0][0]
    final_loss = json.loads(ckpt.read_text())["final_train_loss"]
    assert abs(origin["loss_train"] - final_loss) < 1e-9 * max(1.0, final_loss)
    assert any(r["loss_train"] != r["loss_test"] for r in rows if (r["a"], r["b"]) != (0, 0))


def test_landscape_rejects_mismatched_checkpoint(trained, tmp_path, data_root):
    d, _ = trained
    other = make_config(tmp_path / "gat.json", data_root, tmp_path / "x", arch="gat", heads=2, hidden_dim=4)
    rc = run("landscape", "--checkpoint", d / "base" / "checkpoints" / "seed_0.json", "--config", other,
             "--grid", 3, "--out", tmp_path / "s.csv")
    assert rc == 3


def test_report_tables(trained, tmp_path, data_root, capsys):
    d, cfg = trained
    root = tmp_path / "bundle"
    import shutil

    shutil.copytree(d / "base", root / "base")
    assert run("report", "--in", root) == 0
    single = capsys.readouterr().out.splitlines()
    assert len(single) == 3 and single[2].startswith("| GCN | ")

    ewa = make_config(tmp_path / "ewa.json", data_root, root / "ewa", method={"ewa.begin": 3, "ewa.end": 1,
                                                                              "ewa.alpha": 0.5})
    assert run("train", "--config", ewa, "--jobs", 1) == 0
    capsys.readouterr()
    assert run("report", "--in", root) == 0
    table = capsys.readouterr().out.splitlines()
    base = json.loads((root / "base" / "summary.json").read_text())
    meth = json.loads((root / "ewa" / "summary.json").read_text())
    delta = 100 * (meth["mean"] - base["mean"])
    assert table[0] == "| Model | toy ra_pl |"
    assert table[3] == f"| + EWA | {delta:+.2f} ± {100 * meth['sd']:.2f} |"

    assert run("report", "--in", root, "--format", "csv") == 0
    assert capsys.readouterr().out.splitlines()[0] == "Model,toy ra_pl"

    ind = make_config(tmp_path / "ind.json", data_root, root / "ind", mode="inductive",
                      split={"kind": "s622", "seed": 0})
    assert run("train", "--config", ind, "--seeds", "0..1", "--jobs", 1) == 0
    assert run("report", "--in", root) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flatgraph", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "landscape" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "flatgraph", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
