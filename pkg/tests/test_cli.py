import json
import subprocess
import sys

import pytest

from fedgcdr.cli import main
from fedgcdr.config import RunConfig, load_config

SMALL = """
[pipeline]
rounds = 3
finetune_epochs = 2
[synth]
n_users = 60
n_items = 150
density = 0.06
[attack]
iterations = 20
restarts = 1
n_users = 5
n_items = 8
degree = 2
seeds = [0]
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL, encoding="utf-8")
    return str(p)


def run(conf, *args):
    return main(["--config", conf, *args])


@pytest.fixture
def prepared(tmp_path, conf):
    assert run(conf, "synth", "--out", str(tmp_path / "raw")) == 0
    assert run(conf, "prepare", "--input-dir", str(tmp_path / "raw"), "--out", str(tmp_path / "prep")) == 0
    return tmp_path / "prep"


def files_of(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_synth_writes_four_domains_deterministically(tmp_path, conf):
    for name in ("a", "b"):
        assert run(conf, "synth", "--seed", "5", "--out", str(tmp_path / name)) == 0
    a = files_of(tmp_path / "a")
    assert sorted(a) == ["domain_0.csv", "domain_1.csv", "domain_2.csv", "domain_3.csv", "manifest.json"]
    b = files_of(tmp_path / "b")
    assert {k: v for k, v in a.items() if k != "manifest.json"} == {k: v for k, v in b.items() if k != "manifest.json"}


def test_synth_rejects_bad_density(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth]\ndensity = 0.0\n", encoding="utf-8")
    assert main(["--config", str(bad), "synth", "--out", str(tmp_path / "x")]) == 2
    assert "density" in capsys.readouterr().err


def test_prepare_two_files_and_repeatable(tmp_path, conf):
    run(conf, "synth", "--out", str(tmp_path / "raw"))
    inputs = [str(tmp_path / "raw" / f"domain_{d}.csv") for d in (0, 1)]
    for name in ("p1", "p2"):
        assert run(conf, "prepare", *inputs, "--out", str(tmp_path / name)) == 0
    p1 = files_of(tmp_path / "p1")
    assert {"split_0.csv", "split_1.csv", "registry.json", "items.json"} <= set(p1)
    assert {k: v for k, v in p1.items() if k != "manifest.json"} == {
        k: v for k, v in files_of(tmp_path / "p2").items() if k != "manifest.json"
    }


def test_prepare_missing_file(tmp_path, conf, capsys):
    missing = tmp_path / "nowhere.csv"
    assert run(conf, "prepare", str(missing), "--out", str(tmp_path / "p")) == 2
    assert str(missing) in capsys.readouterr().err
    assert run(conf, "prepare", "--out", str(tmp_path / "p")) == 2


@pytest.mark.parametrize("mode", ["full", "ablate-M", "ablate-T", "single-domain"])
def test_train_modes(tmp_path, conf, prepared, mode):
    out = tmp_path / f"train-{mode}"
    assert run(conf, "--mode", mode, "train", "--data", str(prepared), "--out", str(out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mode"] == mode
    if mode == "full":
        assert manifest["stages"] == ["1", "2", "3-train", "3-finetune"] and manifest["frozen_unchanged"]
    if mode == "single-domain":
        assert manifest["stages"] == ["3-train"] and not list(out.glob("source_*.npz"))


def test_train_evaluate_cost_report_chain(tmp_path, conf, prepared):
    runs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert run(conf, "train", "--data", str(prepared), "--out", str(out)) == 0
        runs.append(out)
    for f in ("metrics.json", "ledger.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()

    ev = tmp_path / "ev"
    args = ["evaluate", "--data", str(prepared), "--embeddings", str(runs[0] / "embeddings.npz"), "--out", str(ev)]
    assert run(conf, *args, "--ranks") == 0
    assert (ev / "metrics.json").read_bytes() == (runs[0] / "metrics.json").read_bytes()
    assert (ev / "ranks.csv").is_file()
    assert run(conf, *args, "--ks", "1", "20") == 0
    assert set(json.loads((ev / "metrics.json").read_text())["hr"]) == {"1", "20"}

    cr = tmp_path / "cr"
    assert run(conf, "cost-report", "--data", str(prepared), "--ledger", str(runs[0] / "ledger.csv"), "--out", str(cr)) == 0
    report = json.loads((cr / "cost_report.json").read_text())
    assert report["exact_match"] and report["measured"]["2"] == 0


def test_manifest_config_reparses(tmp_path, conf, prepared):
    out = tmp_path / "t"
    run(conf, "--seed", "4", "train", "--data", str(prepared), "--out", str(out))
    echoed = json.loads((out / "manifest.json").read_text())["run_config"]
    assert RunConfig.from_dict(echoed) == load_config(conf).with_overrides(seed=4, out=str(out))


def test_cost_report_sparse_and_empty(tmp_path, prepared):
    sparse = tmp_path / "sparse.toml"
    sparse.write_text("[pipeline]\nsparse_uploads = true\n", encoding="utf-8")
    assert main(["--config", str(sparse), "cost-report", "--data", str(prepared), "--out", str(tmp_path / "s")]) == 2
    empty = tmp_path / "empty.toml"
    empty.write_text("[pipeline]\nrounds = 0\nfinetune_epochs = 0\n", encoding="utf-8")
    assert main(["--config", str(empty), "cost-report", "--data", str(prepared), "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "cost_report.json").read_text())
    assert set(report["predicted"].values()) == {0}


def test_attack_sweep(tmp_path, conf):
    for name in ("a1", "a2"):
        assert run(conf, "attack", "--out", str(tmp_path / name)) == 0
    rows = (tmp_path / "a1" / "leakage_sweep.csv").read_text().splitlines()
    assert rows[0] == "epsilon,delta,seed,lambda,mean_user_leak,mean_item_leak,recon_error"
    assert [r.split(",")[0] for r in rows[1:]] == ["4.0", "8.0", "16.0", "32.0", "64.0"]
    assert (tmp_path / "a1" / "leakage_sweep.csv").read_bytes() == (tmp_path / "a2" / "leakage_sweep.csv").read_bytes()
    assert run(conf, "attack", "--epsilons", "8", "--out", str(tmp_path / "one")) == 0
    assert len((tmp_path / "one" / "leakage_sweep.csv").read_text().splitlines()) == 2


def test_bad_log_level(tmp_path, conf, monkeypatch, capsys):
    monkeypatch.setenv("FEDGCDR_LOG", "loud")
    assert run(conf, "synth", "--out", str(tmp_path / "x")) == 2
    assert "FEDGCDR_LOG" in capsys.readouterr().err


def test_module_entry_point_exit_code(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fedgcdr", "train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2 and "registry.json" in proc.stderr
