"""Finite-difference audits of every hand-written backward pass.

Each ``audit_*`` function draws ``n`` random small instances and returns the worst
coordinate-wise relative error between the analytic gradient and central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import adversarial as adv
from .attention import (AttentionConfig, TEMPORAL_OFFSET, attention_backward, attention_forward,
                        attention_params, temporal_attention_bias, temporal_confidence_inputs,
                        temporal_params, _temporal_backward, _temporal_forward)
from .diffusion import diffusion_backward, fuse_backward, fuse_predictions, robust_diffusion
from .graph import SparseGraph, generate_sbm, normalize_adjacency
from .nn import (ACTIVATIONS, MLPSpec, ParamBlock, contrastive_loss, gradient_audit, mlp_backward,
                 mlp_forward, sigmoid)
from .residual import (confidence_backward, confidence_inputs, confidence_params, init_residual,
                       propagate_residual, propagate_residual_backward, reintegrate_backward,
                       reintegrate_residual)
from .spectral import spectral_clip

STEP = 1e-5
THRESHOLD = 1e-4


def _graph(rng, n=None):
    n = int(rng.integers(5, 11)) if n is None else n
    return generate_sbm(n, 2, 0.6, 0.3, 3, 1.0, int(rng.integers(1 << 30)))


def _worst(errs):
    return float(max(errs)) if errs else 0.0


def audit_mlp(n=20, seed=0):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        act = ACTIVATIONS[k % len(ACTIVATIONS)]
        out = ACTIVATIONS[(k // len(ACTIVATIONS)) % len(ACTIVATIONS)]
        spec = MLPSpec((3, 4, 2), act, out)
        P = ParamBlock.create(spec.shapes(), k)
        P.values += 0.2 * rng.standard_normal(len(P))
        x = rng.standard_normal((5, 3))
        U = rng.standard_normal((5, 2))
        f = lambda: float(np.sum(mlp_forward(spec, P, x)[0] * U))
        _, cache = mlp_forward(spec, P, x)
        P.zero_grad()
        dx = mlp_backward(spec, P, cache, U)
        errs += [gradient_audit(f, P.values, P.grads.copy(), STEP), gradient_audit(f, x, dx, STEP)]
    return _worst(errs)


def audit_attention(n=20, seed=1, temporal=False):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng)
        d = 3
        cfg = AttentionConfig(heads=int(rng.integers(1, 4)), head_dim=int(rng.integers(1, 4)),
                              dropout=0.0, bias_hidden=3, temporal=temporal, temporal_hidden=3)
        P = attention_params(d, cfg, k)
        P.values += 0.3 * rng.standard_normal(len(P))
        X = rng.standard_normal((g.n_nodes, d))
        ts = rng.uniform(0, 3, g.n_nodes) if temporal else None
        U = rng.standard_normal((g.n_nodes, cfg.width))
        f = lambda: float(np.sum(attention_forward(g, X, P, cfg, timestamps=ts).Z * U))
        out = attention_forward(g, X, P, cfg, timestamps=ts)
        P.zero_grad()
        dX = attention_backward(out, P, U)
        errs += [gradient_audit(f, P.values, P.grads.copy(), STEP), gradient_audit(f, X, dX, STEP)]
    return _worst(errs)


def audit_temporal(n=20, seed=2):
    """Temporal attention kernel term and temporal confidence."""
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        d = 2
        P = temporal_params(d, 3, k)
        P.values += 0.3 * rng.standard_normal(len(P))
        m = 6
        xi, xj = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        ti, tj = rng.uniform(0, 4, m), rng.uniform(0, 4, m)
        u = rng.standard_normal(m)
        f = lambda: float(np.sum(temporal_attention_bias(np.zeros(m), xi, xj, ti, tj, P) * u))
        _, cache = _temporal_forward(P, 0, xi, xj, ti - tj)
        P.zero_grad()
        _temporal_backward(P, 0, cache, u)
        errs.append(gradient_audit(f, P.values, P.grads.copy(), STEP))

        g = _graph(rng)
        g = SparseGraph(g.n_nodes, g.edges, g.features, g.labels, g.n_classes,
                        timestamps=rng.uniform(0, 5, g.n_nodes))
        X = rng.standard_normal((g.n_nodes, d))
        C = confidence_params(d, k, extra=1)
        C.values += 0.3 * rng.standard_normal(len(C))
        inp = temporal_confidence_inputs(g, X, 6.0)
        w = rng.standard_normal(g.n_nodes)
        fc = lambda: float(sigmoid(inp @ C.view(0)[:, 0] + C.view(1)[0]) @ w)
        c = sigmoid(inp @ C.view(0)[:, 0] + C.view(1)[0])
        C.zero_grad()
        confidence_backward(inp, c, C, w)
        errs.append(gradient_audit(fc, C.values, C.grads.copy(), STEP))
    return _worst(errs)


def audit_contrastive(n=20, seed=3):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        m, d = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        a, p = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        negs = [rng.choice(m, size=int(rng.integers(0, m)), replace=False) for _ in range(m)]
        tau = float(rng.uniform(0.2, 1.0))
        f = lambda: contrastive_loss(a, p, negs, tau)[0]
        _, (da, dp) = contrastive_loss(a, p, negs, tau)
        errs += [gradient_audit(f, a, da, STEP), gradient_audit(f, p, dp, STEP)]
    return _worst(errs)


def audit_discriminator(n=20, seed=4):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng)
        D = adv.discriminator_params(3, 4, int(rng.integers(1, 4)), k)
        D.values += 0.1 * rng.standard_normal(len(D))
        graph = adv.critic_graph(g.adjacency() * rng.uniform(0.2, 1.0), g.degrees())
        H0 = rng.standard_normal((g.n_nodes, 3))
        w = graph.weights.copy()
        f = lambda: adv.discriminator_forward(adv.CriticGraph(graph.rows, graph.cols, w, graph.norm,
                                                               graph.n), H0, D)[0]
        _, cache = adv.discriminator_forward(graph, H0, D)
        D.zero_grad()
        dH, dw = adv.discriminator_backward(cache, D, 1.0, want_edges=True)
        errs += [gradient_audit(f, D.values, D.grads.copy(), STEP), gradient_audit(f, H0, dH, STEP),
                 gradient_audit(f, w, dw, STEP)]
    return _worst(errs)


def audit_gradient_penalty(n=20, seed=5):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng)
        D = adv.discriminator_params(3, 4, int(rng.integers(1, 4)), k)
        D.values += 0.1 * rng.standard_normal(len(D))
        graph = adv.critic_graph(g.adjacency(), g.degrees())
        H = rng.standard_normal((g.n_nodes, 3))
        coeff = float(rng.uniform(1.0, 10.0))
        f = lambda: adv.gradient_penalty(graph, H, D, coeff, accumulate=False)[0]
        D.zero_grad()
        adv.gradient_penalty(graph, H, D, coeff)
        errs.append(gradient_audit(f, D.values, D.grads.copy(), STEP))
    return _worst(errs)


def audit_generator(n=20, seed=6):
    """Generator parameters through the soft adjacency into the critic score."""
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng, int(rng.integers(6, 11)))
        gan = adv.AdversarialTopology(g, g.features, adv.GanConfig(delta=float(rng.uniform(0.2, 1.0)),
                                                                    gen_hidden=4, disc_hidden=4), k)
        gan.gen.values += 0.3 * rng.standard_normal(len(gan.gen))
        s = adv.budget_scale(gan.flips().p, gan.cfg.delta, g.n_edges)

        def score():
            fl = gan.flips()
            Ap = adv.soft_adjacency(gan.A, fl, fl.p * s)
            return adv.discriminator_forward(adv.critic_graph(Ap, gan.deg), gan._smooth(Ap), gan.disc)[0]

        fl = gan.flips()
        Ap = adv.soft_adjacency(gan.A, fl, fl.p * s)
        cg = adv.critic_graph(Ap, gan.deg)
        _, cache = adv.discriminator_forward(cg, gan._smooth(Ap), gan.disc)
        dH0, dw = adv.discriminator_backward(cache, gan.disc, 1.0, want_edges=True)
        dP = gan._adjacency_grad_to_p(cg, dw, dH0, s)
        gan.gen.zero_grad()
        adv.generator_backward(fl, gan.gen, dP)
        errs.append(gradient_audit(score, gan.gen.values, gan.gen.grads.copy(), STEP))
    return _worst(errs)


def audit_residual(n=20, seed=7):
    """Confidence -> residual propagation -> reintegration, on clipped operators."""
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng)
        op, _ = spectral_clip(normalize_adjacency(g))
        C = 3
        Z0 = rng.uniform(0, 1, (g.n_nodes, C))
        Y = np.zeros_like(Z0)
        lab = rng.choice(g.n_nodes, size=3, replace=False)
        Y[lab, rng.integers(0, C, 3)] = 1.0
        mask = np.zeros(g.n_nodes, dtype=bool)
        mask[lab] = True
        X = rng.standard_normal((g.n_nodes, 2))
        P = confidence_params(2, k)
        P.values += 0.5 * rng.standard_normal(len(P))
        inp = confidence_inputs(g, X)
        U = rng.standard_normal(Z0.shape)
        T = int(rng.integers(1, 8))

        def run(record=False):
            c = sigmoid(inp @ P.view(0)[:, 0] + P.view(1)[0])
            st = propagate_residual(init_residual(Z0, Y), op, c, T, 0.0, record=record)
            return c, st, reintegrate_residual(Z0, st, mask)

        f = lambda: float(np.sum(run()[2] * U))
        c, st, _ = run(True)
        dR = reintegrate_backward(st, mask, U)
        dc, _ = propagate_residual_backward(st, op, c, dR)
        P.zero_grad()
        confidence_backward(inp, c, P, dc)
        errs.append(gradient_audit(f, P.values, P.grads.copy(), STEP))
    return _worst(errs)


def audit_diffusion(n=20, seed=8):
    """Clipped diffusion and fusion w.r.t. their inputs."""
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n):
        g = _graph(rng)
        op = normalize_adjacency(g)
        Zr = rng.uniform(-0.3, 1.3, (g.n_nodes, 3))
        L = rng.standard_normal((g.n_nodes, 3))
        gamma, rho = float(rng.uniform(0.1, 0.9)), float(rng.uniform(0, 1))
        U = rng.standard_normal(Zr.shape)

        def f():
            res = robust_diffusion(Zr, op, gamma, 8, 0.0)
            return float(np.sum(fuse_predictions(L, res.Z_inf, rho) * U))

        res = robust_diffusion(Zr, op, gamma, 8, 0.0, record=True)
        dL, dZ = fuse_backward(L, rho, U)
        dZr = diffusion_backward(res, op, gamma, dZ)
        errs += [gradient_audit(f, Zr, dZr, STEP), gradient_audit(f, L, dL, STEP)]
    return _worst(errs)


AUDITS: dict[str, Callable[[], float]] = {
    "mlp": audit_mlp,
    "attention": audit_attention,
    "attention_temporal": lambda: audit_attention(seed=11, temporal=True),
    "temporal": audit_temporal,
    "contrastive": audit_contrastive,
    "discriminator": audit_discriminator,
    "gradient_penalty": audit_gradient_penalty,
    "generator": audit_generator,
    "residual": audit_residual,
    "diffusion": audit_diffusion,
}


def run_all() -> dict:
    return {name: fn() for name, fn in AUDITS.items()}
