"""Acceptance criteria AC1-AC10.

Each test records a PASS/FAIL line (printed in the terminal summary) before asserting.
"""

import time
from contextlib import contextmanager, nullcontext
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp

from robustprop import pipeline as pl
from robustprop.adversarial import AdversarialTopology, GanConfig
from robustprop.attention import AttentionConfig, attention_forward, attention_params
from robustprop.audit import AUDITS
from robustprop.config import ExperimentConfig, default_sbm
from robustprop.diffusion import ensemble, fuse_predictions, robust_diffusion
from robustprop.graph import (PropagationOperator, adjacency_operator, generate_sbm,
                              normalize_adjacency)
from robustprop.metrics import (counterfactual_delta, delta_auc, embedding_shift, gamma_sens,
                                pn_ps_bounds, retention_K, roc_auc, s_pair)
from robustprop.nn import softmax
from robustprop.residual import dense_fixed_point_oracle, init_residual, propagate_residual
from robustprop.spectral import (cap_confidence, clip_distortion_norm, contraction_factor,
                                 power_iteration, spectral_clip, weighted_operator_norm)

SMOKE_SEEDS = [0, 1, 2, 3, 4]


@contextmanager
def criterion(record, number):
    """Record FAIL with the exception text if the body raises before recording."""
    try:
        yield
    except Exception as exc:
        from conftest import AC_RESULTS
        if number not in AC_RESULTS or AC_RESULTS[number][0]:
            record(number, False, f"{type(exc).__name__}: {exc}".splitlines()[0][:200])
        raise


def single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=1)


def test_ac1_contraction(record):
    with criterion(record, 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        worst_err, worst_excess = 0.0, -np.inf
        for k in range(100):
            n = int(rng.integers(8, 65))
            g = generate_sbm(n, int(rng.integers(1, 4)), rng.uniform(0.1, 0.7), rng.uniform(0.0, 0.3),
                             1, 1.0, k)
            # raw adjacency on odd instances so the clip actually binds
            base = normalize_adjacency(g) if k % 2 == 0 else adjacency_operator(g)
            op, _ = spectral_clip(base)
            c = cap_confidence(rng.uniform(0.01, 0.999999, n))
            kappa = contraction_factor(op, c)
            R0 = rng.standard_normal((n, 3))
            out = propagate_residual(init_residual(R0, np.zeros_like(R0)), op, c, T=5000, tol=1e-14)
            worst_err = max(worst_err, float(np.abs(out.R - dense_fixed_point_oracle(op, c, R0)).max()))
            steps = np.asarray(out.trace)
            # ratios of steps near machine precision are round-off, not contraction
            live = steps[:-1] > 1e-8 * np.linalg.norm(R0)
            if live.any():
                ratios = steps[1:][live] / steps[:-1][live]
                worst_excess = max(worst_excess, float(ratios.max() - kappa))
        elapsed = time.perf_counter() - t0
        ok = worst_err < 1e-6 and worst_excess <= 1e-6 and elapsed < 10
        record(1, ok, f"max_err={worst_err:.2e} max(ratio-kappa)={worst_excess:.2e} t={elapsed:.1f}s")
    assert ok


def test_ac2_clipping_lemma(record):
    with criterion(record, 2):
        t0 = time.perf_counter()
        rng = np.random.default_rng(202)
        worst_norm, worst_rel, nus = 0.0, 0.0, []
        for k in range(50):
            n = int(rng.integers(8, 65))
            if k % 2:
                M = rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.3)
            else:
                g = generate_sbm(n, 2, 0.4, 0.1, 1, 1.0, k)
                M = (g.adjacency() * rng.uniform(0.2, 1.0)).toarray()
            M *= rng.uniform(1.1, 3.0) / np.linalg.norm(M, 2)
            op = PropagationOperator.from_matrix(sp.csr_array(M), norm_iters=5000)
            clipped, rep = spectral_clip(op)
            nus.append(rep.nu_before)
            c = cap_confidence(rng.uniform(0.01, 0.999999, n))
            worst_norm = max(worst_norm, weighted_operator_norm(clipped, c))
            diff = op.values - clipped.values
            measured = power_iteration(diff, 5000, k, 1e-15)
            predicted = clip_distortion_norm(rep.nu_before)
            exact = np.linalg.norm(diff.toarray(), 2)
            worst_rel = max(worst_rel, abs(measured - predicted) / predicted,
                            abs(exact - predicted) / predicted)
        elapsed = time.perf_counter() - t0
        ok = (worst_norm <= 0.98 + 1e-6 and worst_rel <= 1e-6 and elapsed < 5
              and 1.1 - 1e-6 <= min(nus) and max(nus) <= 3.0 + 1e-6)
        record(2, ok, f"max||diag(c)A||={worst_norm:.6f} distortion_rel={worst_rel:.2e} "
                      f"nu in [{min(nus):.3f},{max(nus):.3f}] t={elapsed:.1f}s")
    assert ok


def test_ac3_gradient_audits(record):
    with criterion(record, 3):
        t0 = time.perf_counter()
        errs = {name: fn() for name, fn in AUDITS.items()}
        elapsed = time.perf_counter() - t0
        worst = max(errs, key=errs.get)
        ok = all(e < 1e-4 for e in errs.values()) and elapsed < 60
        record(3, ok, f"{len(errs)} audits x 20 configs, worst {worst}={errs[worst]:.2e} t={elapsed:.1f}s")
    assert ok, errs


def test_ac4_fixed_point_oracles(record):
    with criterion(record, 4):
        rng = np.random.default_rng(404)
        worst = 0.0
        for k in range(20):
            n = int(rng.integers(10, 40))
            g = generate_sbm(n, 2, 0.3, 0.1, 1, 1.0, k)
            A = g.adjacency().toarray() + np.eye(n)
            P = A / A.sum(1, keepdims=True)
            gamma = float(rng.uniform(0.1, 0.9))
            Zr = softmax(rng.standard_normal((n, 3)))
            res = robust_diffusion(Zr, sp.csr_array(P), gamma, max_steps=5000, tol=1e-13)
            assert not res.clip_active
            dense = np.linalg.solve(np.eye(n) - gamma * P, (1 - gamma) * Zr)
            worst = max(worst, float(np.abs(res.Z_inf - dense).max()))
        half = PropagationOperator.from_matrix(np.full((2, 2), 0.5))
        R0 = np.array([[1.0], [0.0]])
        R = propagate_residual(init_residual(R0, np.zeros_like(R0)), half, np.full(2, 0.5),
                               T=500, tol=1e-15).R
        Z = robust_diffusion(np.eye(2), np.full((2, 2), 0.5), 0.5, max_steps=500, tol=1e-15).Z_inf
        e_r = float(np.abs(R - [[0.75], [0.25]]).max())
        e_z = float(np.abs(Z - [[0.75, 0.25], [0.25, 0.75]]).max())
        ok = worst < 1e-6 and e_r < 1e-9 and e_z < 1e-9
        record(4, ok, f"dense_solve_max_err={worst:.2e} R*_err={e_r:.1e} Zinf_err={e_z:.1e}")
    assert ok


def test_ac5_normalization_invariants(record):
    with criterion(record, 5):
        rng = np.random.default_rng(505)
        att_err = soft_err = 0.0
        bounds_ok = True
        for k in range(60):
            n = int(rng.integers(5, 40))
            # sparse draws leave some nodes isolated
            g = generate_sbm(n, 2, rng.uniform(0.02, 0.5), rng.uniform(0.0, 0.2), 3, 1.0, k)
            cfg = AttentionConfig(heads=int(rng.integers(1, 5)), head_dim=int(rng.integers(1, 6)),
                                  dropout=0.0, bias_hidden=4)
            Pa = attention_params(3, cfg, k)
            Pa.values *= rng.uniform(0.5, 20.0)
            X = rng.standard_normal((n, 3)) * rng.uniform(0.1, 10.0)
            out = attention_forward(g, X, Pa, cfg)
            has = np.bincount(out.rows, minlength=n) > 0
            for h in range(cfg.heads):
                sums = np.bincount(out.rows, weights=out.omega[:, h], minlength=n)
                att_err = max(att_err, float(np.abs(sums[has] - 1).max(initial=0.0)))

            L = rng.standard_normal((n, 4)) * 10.0 ** rng.uniform(-2, 3)
            S = softmax(L)
            soft_err = max(soft_err, float(np.abs(S.sum(1) - 1).max()))
            Zr = rng.uniform(-1.0, 2.0, (n, 4))
            op = normalize_adjacency(g)
            Zi = robust_diffusion(Zr, op, float(rng.uniform(0, 0.99)), max_steps=50).Z_inf
            F = fuse_predictions(L, Zi, float(rng.uniform(0, 1)))
            E = ensemble([F, Zi, np.clip(Zr, 0, 1)], rng.dirichlet(np.ones(3)))
            bounds_ok &= all(bool(np.all((M >= 0) & (M <= 1))) for M in (S, Zi, F, E))
        ok = att_err <= 1e-9 and soft_err <= 1e-9 and bounds_ok
        record(5, ok, f"attention_row_err={att_err:.1e} softmax_row_err={soft_err:.1e} "
                      f"outputs_in_[0,1]={bounds_ok}")
    assert ok


def pair_count_auc(s, y):
    pos, neg = s[y], s[~y]
    twice = int(sum(2 * (p > q) + (p == q) for p in pos for q in neg))
    return Fraction(twice, 2 * len(pos) * len(neg))


def test_ac6_metric_oracles(record):
    with criterion(record, 6):
        rng = np.random.default_rng(606)
        checks = {}
        exact = True
        for _ in range(200):
            n = int(rng.integers(2, 101))
            s = rng.integers(0, int(rng.integers(2, 20)), n) / 7.0
            y = rng.random(n) < rng.uniform(0.1, 0.9)
            y[0], y[-1] = True, False
            exact &= roc_auc(s, y) == float(pair_count_auc(s, y))
        checks["auc_exact"] = exact

        checks["pn_ps_equal"] = pn_ps_bounds([[5, 5], [5, 5]]) == (0.0, 0.0)
        checks["pn_0.7"] = abs(pn_ps_bounds([[9, 1], [2, 8]])[0] - 0.7) < 1e-12
        checks["pn_ps_deterministic"] = pn_ps_bounds([[10, 0], [0, 10]]) == (1.0, 1.0)
        checks["delta_auc"] = abs(delta_auc(0.95, 1.0) + 5.0) < 1e-12 and delta_auc(0.7, 0.7) == 0.0

        H = rng.standard_normal((5, 3))
        Hp = rng.standard_normal((5, 3))
        r_abs = np.sqrt(sum((H[i, j] - Hp[i, j]) ** 2 for i in range(5) for j in range(3)))
        r_rel = sum(np.sqrt(sum((H[i, j] - Hp[i, j]) ** 2 for j in range(3)))
                    / np.sqrt(sum(H[i, j] ** 2 for j in range(3))) for i in range(5)) / 5
        a, r = embedding_shift(H, Hp)
        checks["shift"] = (embedding_shift(H, H) == (0.0, 0.0) and abs(embedding_shift(H, 2 * H)[1] - 1) < 1e-12
                           and abs(a - r_abs) < 1e-12 and abs(r - r_rel) < 1e-12)

        checks["retention"] = retention_K([0.7] * 4) == 0.0 and abs(retention_K([0.8, 0.9]) - 0.1) < 1e-12

        v = rng.standard_normal(3)
        checks["s_pair"] = (abs(s_pair(np.tile(v, (4, 1))) - 1) < 1e-12
                            and abs(s_pair(np.eye(2)) - 0.5) < 1e-12)

        g = generate_sbm(20, 2, 0.3, 0.1, 1, 1.0, 0)
        op = normalize_adjacency(g).values
        D = sp.random(20, 20, density=0.1, random_state=3)
        pert = sp.csr_array(op + D + D.T)
        lin = lambda A, X: A @ X
        X = rng.standard_normal((20, 4))
        checks["gamma_identity"] = abs(gamma_sens(lin, op, pert, np.eye(20)) - 1) < 1e-6
        checks["gamma_bound"] = gamma_sens(lin, op, pert, X) <= np.linalg.norm(X, 2) * (1 + 1e-3)

        yb = np.array([1, 1, 0, 0])
        P = np.stack([1 - np.array([0.9, 0.8, 0.3, 0.2]), [0.9, 0.8, 0.3, 0.2]], 1)
        Q = np.stack([1 - np.array([0.9, 0.25, 0.3, 0.2]), [0.9, 0.25, 0.3, 0.2]], 1)
        oracle = 100 * float(pair_count_auc(Q[:, 1], yb == 1) - pair_count_auc(P[:, 1], yb == 1))
        checks["counterfactual"] = (counterfactual_delta(P, P, yb) == 0.0
                                    and abs(counterfactual_delta(P, Q, yb) - oracle) < 1e-9)
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        record(6, ok, f"{len(checks)} oracle groups, failed={failed or 'none'}")
    assert ok, failed


def test_ac7_sbm_spectral_trend(record):
    with criterion(record, 7):
        t0 = time.perf_counter()
        base = default_sbm()
        means = []
        for p_inter in (0.05, 0.1, 0.2):
            norms = [adjacency_operator(generate_sbm(200, base["blocks"], base["p_intra"], p_inter, 1,
                                                     1.0, s)).norm_estimate for s in range(10)]
            means.append(float(np.mean(norms)))
        elapsed = time.perf_counter() - t0
        ok = all(b >= a for a, b in zip(means, means[1:])) and elapsed < 30
        record(7, ok, "mean ||A||_2 at p_inter 0.05/0.1/0.2 = "
                      + "/".join(f"{m:.3f}" for m in means) + f" t={elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def smoke():
    cfg = ExperimentConfig()
    with single_thread():
        t0 = time.perf_counter()
        runs = [pl.run_training(cfg, s) for s in SMOKE_SEEDS]
        elapsed = time.perf_counter() - t0
        reruns = [pl.run_training(cfg, s) for s in SMOKE_SEEDS]
    return cfg, runs, reruns, elapsed


def majority_baseline(r):
    train_labels = r.g.labels[r.split.train]
    majority = np.bincount(train_labels).argmax()
    return float(np.mean(r.g.labels[r.split.test] == majority))


def same_run(a, b):
    return (np.array_equal(a.predictions, b.predictions) and a.report.to_json() == b.report.to_json()
            and a.losses == b.losses and a.diagnostics == b.diagnostics)


@pytest.mark.slow
def test_ac8_smoke_training(smoke, record):
    with criterion(record, 8):
        cfg, runs, reruns, elapsed = smoke
        g = runs[0].g
        accs = [r.report.accuracy for r in runs]
        bases = [majority_baseline(r) for r in runs]
        min_entropy = min(d.flip_entropy for r in runs for d in r.diagnostics)
        epochs_ok = all(len(r.diagnostics) == cfg.epochs == 50 for r in runs)
        identical = all(same_run(a, b) for a, b in zip(runs, reruns))
        beat = sum(a > b for a, b in zip(accs, bases))
        ok = (g.n_nodes == 200 and cfg.label_rate == 0.15 and beat == 5 and min_entropy > 0.3
              and epochs_ok and identical and elapsed < 300)
        record(8, ok, f"acc={[round(a, 3) for a in accs]} baseline={[round(b, 3) for b in bases]} "
                      f"min_entropy={min_entropy:.4f} bit_identical={identical} t={elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_ac9_robustness_ordering(smoke, record):
    with criterion(record, 9):
        _, runs, _, _ = smoke
        d5, d10, clean = [], [], []
        for r in runs:
            rows = {row.name: row for row in pl.robustness_rows(r, r.seed)}
            d5.append(rows["del_5"].delta_auc_pct)
            d10.append(rows["del_10"].delta_auc_pct)
            clean.append(rows["clean"].auc)
        m5, m10 = float(np.mean(d5)), float(np.mean(d10))
        ok = m10 <= m5
        # a saturated clean AUC makes the ordering hold with equality
        record(9, ok, f"mean dAUC del_5={m5:.4f}% del_10={m10:.4f}% over {len(runs)} seeds "
                      f"(clean AUC min={min(clean):.4f})")
    assert ok


@pytest.mark.slow
def test_ac10_causal_sanity(smoke, record):
    with criterion(record, 10):
        cfg, runs, _, _ = smoke
        pn_ps = []
        for r in runs:
            c = pl.run_causal_suite(cfg, r)
            pn_ps += [c.pn, c.ps]
        cfg0 = replace(cfg, delta=0.0)
        with single_thread():
            r0 = pl.run_training(cfg0, 0)
        c0 = pl.run_causal_suite(cfg0, r0)
        pn_ps += [c0.pn, c0.ps]
        in_range = all(0.0 <= v <= 1.0 for v in pn_ps)
        ok = c0.counterfactual_delta == 0.0 and in_range
        record(10, ok, f"delta=0 counterfactual={c0.counterfactual_delta!r} "
                       f"PN/PS range=[{min(pn_ps):.3f},{max(pn_ps):.3f}] over {len(pn_ps) // 2} runs")
    assert ok


def test_ac10_zero_budget_operator_is_exactly_clean():
    g = generate_sbm(40, 2, 0.2, 0.05, 3, 1.0, 0)
    gan = AdversarialTopology(g, g.features, GanConfig(delta=0.0), 0)
    assert np.array_equal(gan.perturbed_operator().todense(), normalize_adjacency(g).todense())
