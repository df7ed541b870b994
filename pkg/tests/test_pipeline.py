import json
from dataclasses import replace

import numpy as np
import pytest

from robustprop import pipeline as pl
from robustprop.config import OUTPUT_ENV, ExperimentConfig
from robustprop.exceptions import ContractViolation
from robustprop.graph import PropagationOperator, SparseGraph, generate_sbm
from robustprop.spectral import ClipReport


def tiny(**kw):
    base = dict(sbm=dict(n=60, blocks=2, p_intra=0.2, p_inter=0.02, feature_dim=4, feature_noise=1.0),
                enc_hidden=8, d_enc=8, proj_hidden=16, proj_dim=8, heads=2, head_dim=4,
                negatives=8, gen_hidden=8, disc_hidden=8, epochs=3, norm_iters=300)
    base.update(kw)
    return ExperimentConfig(**base)


def test_defaults_follow_hyperparameter_table():
    c = ExperimentConfig()
    assert (c.lr_gan, c.critic_steps, c.gp_coeff, c.T, c.ceiling, c.epsilon) == (1e-4, 5, 10.0, 20, 0.98, 1e-4)
    assert (c.tau, c.negatives, c.aug_dropout, c.proj_hidden, c.heads, c.head_dim) == (0.3, 64, 0.2, 256, 8, 64)
    assert (c.attn_dropout, c.batch, c.weight_decay, c.gamma, c.diffusion_max) == (0.1, 1024, 1e-5, 0.5, 50)
    assert (c.delta, c.rho) == (0.10, 0.5)


@pytest.mark.parametrize("bad", [dict(ceiling=1.0), dict(gamma=1.5), dict(kappas=[0.5, 0.5, 0.5]),
                                 dict(T=0), dict(enabled_modules={"bogus": True}),
                                 dict(sbm={"n": 10, "oops": 1}), dict(residual_mode="other")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_config_unknown_key_and_round_trip(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"nope": 1})
    c = tiny(seeds=[3, 4])
    path = tmp_path / "c.json"
    path.write_text(c.to_json())
    back = ExperimentConfig.load(path)
    assert back == c and back.config_hash() == c.config_hash()


def test_config_hash_ignores_seeds_and_output():
    c = tiny()
    assert replace(c, seeds=[9], output_dir="x").config_hash() == c.config_hash()
    assert replace(c, delta=0.2).config_hash() != c.config_hash()


def test_output_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert tiny().resolve_output() == tmp_path
    assert tiny(output_dir="elsewhere").resolve_output().name == "elsewhere"


def test_split_is_stratified_and_disjoint():
    cfg = tiny(label_rate=0.2)
    g = pl.load_graph(cfg, 0)
    s = pl.make_split(g, cfg, 1)
    assert s.train.sum() == 12
    assert not (s.train & s.test).any() and not s.val.any()
    assert set(np.unique(g.labels[s.train])) == {0, 1}
    s2 = pl.make_split(g, replace(cfg, n_labeled=30), 1)
    assert s2.train.sum() == 30


def test_epochs_zero_is_inference_only():
    r = pl.run_training(tiny(epochs=0), 0)
    assert r.diagnostics == [] and r.losses == [] and r.gan is None
    assert r.predictions.shape == (60, 2)
    assert np.all(np.isfinite(r.predictions))
    assert 0.0 <= r.report.accuracy <= 1.0


def test_short_run_invariants():
    r = pl.run_training(tiny(), 0)
    assert len(r.diagnostics) == 3 and len(r.losses) == 3
    assert all(np.isfinite(v) for row in r.losses for v in row)
    assert max(r.kappa_trace) <= 0.98 * (1 + 1e-6)
    assert all(d.flip_entropy > 0.3 for d in r.diagnostics)
    assert np.all((r.predictions >= 0) & (r.predictions <= 1))


def test_rerun_is_bit_identical(tmp_path):
    a = pl.run_training(tiny(), 5)
    b = pl.run_training(tiny(), 5)
    assert a.report.to_json() == b.report.to_json()
    assert np.array_equal(a.predictions, b.predictions)
    da = pl.write_artifacts(a, tmp_path / "a")
    db = pl.write_artifacts(b, tmp_path / "b")
    for name in ("metrics.json", "diagnostics.csv", "predictions.csv", "clip_report.json",
                 "trace_residual.csv"):
        assert (da / name).read_bytes() == (db / name).read_bytes()


def test_artifact_contents(tmp_path):
    r = pl.run_training(tiny(), 1)
    out = pl.write_artifacts(r, tmp_path)
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["accuracy"] == r.report.accuracy
    clip = json.loads((out / "clip_report.json").read_text())
    assert clip["kappa_after"] <= 0.98 * (1 + 1e-6)
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0] == "node_id,p0,p1,argmax" and len(lines) == 61
    assert len((out / "diagnostics.csv").read_text().splitlines()) == 4


def test_contract_violation_when_safeguard_is_bypassed():
    cfg = tiny(epochs=0)
    r = pl.run_training(cfg, 0)
    ctx = r.ctx
    unsafe = PropagationOperator.from_matrix(ctx.A_norm.values * 10.0)
    bad = pl.Context(ctx.g, ctx.X_ms, ctx.A_norm, unsafe, ctx.clip_report)
    Y = pl.one_hot(np.where(r.g.labeled_mask, r.g.labels, 0), r.split.train, 2)
    with pytest.raises(ContractViolation):
        pl.forward(r.model, bad, cfg, r.split.train, Y, ctx.A_norm, r.kappas)


@pytest.mark.parametrize("off", ["adversarial", "attention", "residual", "diffusion", "ssl"])
def test_module_ablations_run(off):
    cfg = tiny(epochs=2, enabled_modules={off: False})
    r = pl.run_training(cfg, 0)
    assert np.all(np.isfinite(r.predictions))


def test_literal_residual_mode_runs():
    for z0 in ("uniform", "zero"):
        r = pl.run_training(tiny(epochs=2, residual_mode="literal", z0_mode=z0), 0)
        assert np.all(np.isfinite(r.predictions))


def test_edge_features_and_temporal_graph():
    base = generate_sbm(40, 2, 0.25, 0.03, 3, 1.0, 0)
    rng = np.random.default_rng(0)
    g = SparseGraph.from_edges(40, base.edges, base.features, base.labels, 2,
                               edge_features=rng.standard_normal((base.n_edges, 2)),
                               timestamps=rng.uniform(0, 10, 40))
    cfg = tiny(epochs=2, enabled_modules={"temporal": True})
    r = pl.run_training(cfg, 0, g=g)
    assert r.model.edge is not None and r.model.attn_cfg.temporal
    assert np.all(np.isfinite(r.predictions))


def test_mc_inference_and_fitted_ensemble():
    r = pl.run_training(tiny(mc_perturbations=3, fit_ensemble=True), 0)
    assert abs(r.kappas.sum() - 1) < 1e-12
    assert np.all(np.isfinite(r.predictions))


def test_robustness_rows():
    r = pl.run_training(tiny(), 0)
    rows = pl.robustness_rows(r, 0)
    assert [x.name for x in rows] == [p[0] for p in pl.PERTURBATIONS]
    clean = rows[0]
    assert clean.delta_auc_pct == 0.0 and clean.r_abs == 0.0
    m = r.g.n_edges
    k5 = int(np.floor(0.05 * m + 0.5))
    counts = {x.name: x.n_edges for x in rows}
    assert counts["del_5"] == m - k5 and counts["add_5"] == m + k5 and counts["hybrid_5_5"] == m


def test_causal_suite_zero_budget():
    cfg = tiny(delta=0.0)
    r = pl.run_training(cfg, 0)
    c = pl.run_causal_suite(cfg, r)
    assert c.counterfactual_delta == 0.0
    assert 0.0 <= c.pn <= 1.0 and 0.0 <= c.ps <= 1.0


def test_causal_suite_bounds():
    cfg = tiny()
    r = pl.run_training(cfg, 2)
    c = pl.run_causal_suite(cfg, r)
    assert 0.0 <= c.pn <= 1.0 and 0.0 <= c.ps <= 1.0
    assert np.isfinite(c.counterfactual_delta)


def test_sensitivity_grid_enumeration():
    cfgs = pl.sensitivity_configs(ExperimentConfig())
    assert len(cfgs) == 7
    assert len({c.config_hash() for _, c in cfgs}) == 7
    assert cfgs[0][0] == "default"


def test_sensitivity_default_row_matches_training(tmp_path):
    cfg = tiny(epochs=1, seeds=[0, 1])
    rows = pl.run_sensitivity_grid(cfg)
    assert len(rows) == 7
    accs = [pl.run_training(cfg, s).report.accuracy for s in cfg.seeds]
    assert rows[0]["acc_mean"] == float(np.mean(accs))
    assert all(r["seeds"] == "0 1" for r in rows)
    pl.write_rows(rows, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 8


def test_clip_report_in_result():
    r = pl.run_training(tiny(epochs=1), 0)
    assert isinstance(r.clip_report, ClipReport)
    assert r.clip_report.scale == pytest.approx(1 / (1 + 1e-4), rel=1e-6)
