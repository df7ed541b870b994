import json
import subprocess
import sys

import pytest

from robustprop.cli import main
from robustprop.config import ExperimentConfig
from robustprop.graph import read_graph

TINY = dict(sbm=dict(n=50, blocks=2, p_intra=0.25, p_inter=0.02, feature_dim=4, feature_noise=1.0),
            enc_hidden=8, d_enc=8, proj_hidden=16, proj_dim=8, heads=2, head_dim=4, negatives=8,
            gen_hidden=8, disc_hidden=8, epochs=2, norm_iters=200)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def test_train_writes_artifacts(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config), "--seed", "0", "--seed", "1", "--out", str(out)]) == 0
    for s in (0, 1):
        d = out / f"seed_{s}"
        for name in ("metrics.json", "diagnostics.csv", "predictions.csv", "clip_report.json",
                     "trace_residual.csv"):
            assert (d / name).is_file()
    assert "seed 1: accuracy" in capsys.readouterr().out


def test_train_honours_output_env(config, tmp_path, monkeypatch):
    monkeypatch.setenv("ROBUSTPROP_OUT", str(tmp_path / "envout"))
    assert main(["train", "--config", str(config), "--epochs", "0"]) == 0
    assert (tmp_path / "envout" / "seed_0" / "metrics.json").is_file()


def test_train_is_byte_reproducible(config, tmp_path):
    for tag in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / tag)]) == 0
    for name in ("metrics.json", "predictions.csv", "diagnostics.csv"):
        assert (tmp_path / "a/seed_0" / name).read_bytes() == (tmp_path / "b/seed_0" / name).read_bytes()


def test_spectral_report(config, tmp_path, capsys):
    assert main(["spectral-report", "--config", str(config), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "clip_report.json").read_text())
    assert rep["kappa_after"] <= 0.98 and rep["epsilon"] == 1e-4


def test_robustness_and_causal(config, tmp_path, capsys):
    assert main(["robustness", "--config", str(config), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "robustness.csv").read_text().splitlines()
    assert len(lines) == 7
    assert main(["causal", "--config", str(config), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "seed_0" / "metrics.json").read_text())
    assert 0 <= m["pn_lower"] <= 1 and 0 <= m["ps_lower"] <= 1


def test_sensitivity(config, tmp_path):
    assert main(["sensitivity", "--config", str(config), "--epochs", "0", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "sensitivity.csv").read_text().splitlines()) == 8


def test_gen_sbm(tmp_path):
    path = tmp_path / "g.txt"
    assert main(["gen-sbm", "--n", "30", "--blocks", "3", "--out", str(path)]) == 0
    g = read_graph(path)
    assert g.n_nodes == 30 and g.n_classes == 3


def test_graph_file_config(tmp_path):
    path = tmp_path / "g.txt"
    main(["gen-sbm", "--n", "40", "--p-intra", "0.3", "--feature-dim", "4", "--out", str(path)])
    cfg = dict(TINY, graph_file=str(path))
    cpath = tmp_path / "c.json"
    cpath.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(cpath), "--out", str(tmp_path / "o")]) == 0


def test_usage_errors(tmp_path, config, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["train", "--config", str(bad)]) == 1
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"gamma": 3.0}))
    assert main(["train", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    broken = tmp_path / "broken.txt"
    broken.write_text("garbage\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"graph_file": str(broken)}))
    assert main(["train", "--config", str(cfg)]) == 1


def test_contract_violation_exit_code(config, tmp_path, monkeypatch):
    from robustprop import pipeline
    from robustprop.exceptions import ContractViolation

    def boom(*a, **k):
        raise ContractViolation("kappa above ceiling")

    monkeypatch.setattr(pipeline, "run_training", boom)
    assert main(["train", "--config", str(config), "--out", str(tmp_path)]) == 2


def test_gradcheck_exit_codes(monkeypatch, capsys):
    from robustprop import audit
    monkeypatch.setattr(audit, "AUDITS", {"ok": lambda: 1e-7})
    assert main(["gradcheck"]) == 0
    monkeypatch.setattr(audit, "AUDITS", {"bad": lambda: 1e-2})
    assert main(["gradcheck"]) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "robustprop.cli", "gen-sbm", "--n", "10",
                          "--out", str(tmp_path / "g.txt")], capture_output=True, text=True)
    assert out.returncode == 0 and "10 nodes" in out.stdout


def test_config_default_loads():
    assert ExperimentConfig.from_dict(dict(TINY)).epochs == 2
