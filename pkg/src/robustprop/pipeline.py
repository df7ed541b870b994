"""End-to-end training, evaluation suites and artifact writing."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import adversarial as adv
from .attention import (AttentionConfig, attention_backward, attention_forward, attention_params,
                        temporal_confidence_inputs, thresholded_support)
from .config import ExperimentConfig
from .diffusion import (diffusion_backward, ensemble, fit_kappas, fuse_backward, fuse_predictions,
                        robust_diffusion)
from .exceptions import ContractViolation, NonFiniteError
from .features import aggregate_edge_features, edge_params, multi_scale
from .graph import (PropagationOperator, SparseGraph, generate_sbm, normalize_adjacency,
                    perturb_edges, read_graph)
from .metrics import (MetricReport, accuracy, complexity_estimate, counterfactual_delta,
                      delta_auc, embedding_shift, gamma_sens, macro_auc, outcome_table,
                      pn_ps_bounds, s_pair)
from .nn import (MLPSpec, ParamBlock, adamw_step, contrastive_loss, mlp_backward, mlp_forward,
                 nll_loss, sample_negatives, sigmoid, softmax)
from .residual import (ConfidenceVector, ResidualState, _open_unit, confidence_backward,
                       confidence_inputs, confidence_params, init_residual, propagate_residual,
                       propagate_residual_backward, reintegrate_backward, reintegrate_residual)
from .spectral import ClipReport, cap_confidence, contraction_factor, spectral_clip

logger = logging.getLogger(__name__)

KAPPA_SLACK = 1e-6


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def load_graph(cfg: ExperimentConfig, seed: int) -> SparseGraph:
    if cfg.graph_file:
        return read_graph(cfg.graph_file)
    s = cfg.sbm
    return generate_sbm(int(s["n"]), int(s["blocks"]), float(s["p_intra"]), float(s["p_inter"]),
                        int(s["feature_dim"]), float(s["feature_noise"]), seed)


@dataclass(frozen=True, eq=False)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_split(g: SparseGraph, cfg: ExperimentConfig, seed: int) -> Split:
    """Stratified training sample; the rest of the known nodes go to validation (only when
    ensemble weights are fitted) and test."""
    rng = np.random.default_rng(seed)
    known = np.flatnonzero(g.labeled_mask)
    if known.size == 0:
        raise ValueError("graph has no labeled nodes")
    k = int(cfg.n_labeled) if cfg.n_labeled is not None else max(1, int(round(cfg.label_rate * known.size)))
    k = min(k, known.size - 1) if known.size > 1 else 1
    labels = g.labels[known]
    classes, counts = np.unique(labels, return_counts=True)
    share = np.maximum(1, np.floor(k * counts / counts.sum())).astype(int)
    order = np.argsort(-(k * counts / counts.sum() - share), kind="stable")
    for c in order[: max(0, k - share.sum())]:
        share[c] += 1
    train = []
    for c, m in zip(classes, share):
        pool = known[labels == c]
        train += list(rng.choice(pool, size=min(m, pool.size), replace=False))
    train_mask = np.zeros(g.n_nodes, dtype=bool)
    train_mask[train] = True
    rest = known[~train_mask[known]]
    rest = rng.permutation(rest)
    n_val = int(round(cfg.val_fraction * rest.size)) if cfg.fit_ensemble else 0
    val_mask = np.zeros(g.n_nodes, dtype=bool)
    val_mask[rest[:n_val]] = True
    test_mask = np.zeros(g.n_nodes, dtype=bool)
    test_mask[rest[n_val:]] = True
    return Split(train_mask, val_mask, test_mask)


def one_hot(labels, mask, C) -> np.ndarray:
    Y = np.zeros((len(labels), C))
    idx = np.flatnonzero(mask)
    Y[idx, labels[idx]] = 1.0
    return Y


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Model:
    enc_spec: MLPSpec
    proj_spec: MLPSpec
    head_spec: MLPSpec
    attn_cfg: AttentionConfig
    enc: ParamBlock
    proj: ParamBlock
    attn: ParamBlock
    head: ParamBlock
    conf: ParamBlock
    edge: Optional[ParamBlock] = None

    def blocks(self):
        return [self.enc, self.proj, self.attn, self.head, self.conf]


def build_model(cfg: ExperimentConfig, d_feat: int, n_classes: int, seed: int, temporal: bool,
                d_edge: Optional[int] = None) -> Model:
    """Encoder, projection head, attention, output head and confidence map.

    With edge features the node input is ``[x_i || aggregated edge messages]`` (width 2 d_feat).
    """
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(6)]
    d_in = d_feat * (2 if d_edge else 1)
    d_ms = d_in * (cfg.K_scales + 1)
    enc_spec = MLPSpec((d_ms, cfg.enc_hidden, cfg.d_enc), "gelu", "none")
    proj_spec = MLPSpec((cfg.d_enc, cfg.proj_hidden, cfg.proj_dim), "gelu", "none")
    attn_cfg = AttentionConfig(cfg.heads, cfg.head_dim, cfg.attn_dropout, temporal=temporal,
                               support_threshold=cfg.support_threshold)
    head_in = attn_cfg.width if cfg.enabled("attention") else cfg.d_enc
    head_spec = MLPSpec((head_in, n_classes), "none", "none")
    return Model(
        enc_spec, proj_spec, head_spec, attn_cfg,
        ParamBlock.create(enc_spec.shapes(), seeds[0]),
        ParamBlock.create(proj_spec.shapes(), seeds[1]),
        attention_params(cfg.d_enc, attn_cfg, seeds[2]),
        ParamBlock.create(head_spec.shapes(), seeds[3]),
        confidence_params(cfg.d_enc, seeds[4], extra=1 if temporal else 0),
        edge_params(d_edge, d_feat, seeds[5]) if d_edge else None,
    )


@dataclass(eq=False)
class Context:
    """Per-graph quantities that depend only on the graph and the frozen input map."""

    g: SparseGraph
    X_ms: np.ndarray
    A_norm: PropagationOperator
    A_clip: PropagationOperator
    clip_report: ClipReport


def node_inputs(g: SparseGraph, model: Model, cfg: ExperimentConfig) -> np.ndarray:
    X = g.features
    if model.edge is not None and g.edge_features is not None:
        X = np.concatenate([X, aggregate_edge_features(g, model.edge)], axis=1)
    return X


def make_context(g: SparseGraph, model: Model, cfg: ExperimentConfig) -> Context:
    A_norm = normalize_adjacency(g, cfg.with_self_loops, cfg.norm_iters)
    A_clip, report = spectral_clip(A_norm, cfg.epsilon, norm_iters=cfg.norm_iters)
    X_ms = multi_scale(A_norm, node_inputs(g, model, cfg), cfg.K_scales).concatenated
    return Context(g, X_ms, A_norm, A_clip, report)


@dataclass(eq=False)
class Forward:
    h: np.ndarray
    enc_cache: list
    attn_out: object
    Zp: np.ndarray
    logits: np.ndarray
    head_cache: list
    conf_in: np.ndarray
    c_raw: np.ndarray
    c: np.ndarray
    kappa: float
    Z0: np.ndarray
    residual: Optional[ResidualState]
    Zr: np.ndarray
    diffusion: object
    fused: np.ndarray
    residual_only: np.ndarray
    final: np.ndarray


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(name)


def forward(model: Model, ctx: Context, cfg: ExperimentConfig, train_mask, Y_train, op_prop,
            kappas, rng=None, record=False) -> Forward:
    """One full pass: encoder, confidence, attention, residual correction, diffusion, ensemble."""
    g = ctx.g
    C = Y_train.shape[1]
    h, enc_cache = mlp_forward(model.enc_spec, model.enc, ctx.X_ms)
    _check_finite("encoder", h)

    temporal = model.attn_cfg.temporal
    if temporal:
        conf_in = temporal_confidence_inputs(g, h, float(np.max(g.timestamps)))
    else:
        conf_in = confidence_inputs(g, h)
    c_raw = _open_unit(sigmoid(conf_in @ model.conf.view(0)[:, 0] + model.conf.view(1)[0]))
    c = cap_confidence(c_raw, cfg.ceiling)
    kappa = contraction_factor(ctx.A_clip, c)
    if cfg.enabled("residual") and kappa > cfg.ceiling * (1.0 + KAPPA_SLACK):
        raise ContractViolation(f"contraction factor {kappa:.8g} exceeds ceiling {cfg.ceiling}")

    if cfg.enabled("attention"):
        support = thresholded_support(op_prop, cfg.support_threshold)
        attn_out = attention_forward(support, h, model.attn, model.attn_cfg,
                                     timestamps=g.timestamps if temporal else None, rng=rng)
        Zp = attn_out.Z
    else:
        attn_out = None
        Zp = np.asarray(op_prop.values @ h)
    logits, head_cache = mlp_forward(model.head_spec, model.head, Zp)
    _check_finite("attention", Zp, logits)

    probs = softmax(logits)
    residual = None
    if cfg.residual_mode == "error":
        Z0 = probs
        Y_obs = np.where(train_mask[:, None], Y_train, Z0)
        sign = -1.0
    else:
        fill = 1.0 / C if cfg.z0_mode == "uniform" else 0.0
        Z0 = np.where(train_mask[:, None], Y_train, fill)
        Y_obs = Y_train
        sign = 1.0
    if cfg.enabled("residual"):
        state = init_residual(Z0, Y_obs)
        residual = propagate_residual(state, ctx.A_clip, c, cfg.T, cfg.residual_tol, record=record)
        Zr = reintegrate_residual(Z0, residual, train_mask, sign=sign)
    else:
        Zr = Z0.copy()
    _check_finite("residual", Zr)

    if cfg.enabled("diffusion"):
        diff = robust_diffusion(Zr, op_prop, cfg.gamma, cfg.diffusion_max, cfg.diffusion_tol, record=record)
        Z_inf = diff.Z_inf
    else:
        diff = None
        Z_inf = np.clip(Zr, 0.0, 1.0)
    _check_finite("diffusion", Z_inf)
    fused = fuse_predictions(logits, Z_inf, cfg.rho)
    residual_only = np.clip(Zr, 0.0, 1.0)
    final = ensemble([fused, Z_inf, residual_only], kappas)
    return Forward(h, enc_cache, attn_out, Zp, logits, head_cache, conf_in, c_raw, c, kappa, Z0,
                   residual, Zr, diff, fused, residual_only, final)


def normalized_rows(P, eps=1e-12):
    s = P.sum(axis=1, keepdims=True)
    return P / np.maximum(s, eps), s


def supervised_backward(model: Model, ctx: Context, cfg: ExperimentConfig, fw: Forward, train_mask,
                        labels, kappas, op_prop) -> float:
    """Cross-entropy on the normalised ensemble output; accumulates model gradients."""
    q, s = normalized_rows(fw.final)
    loss, dq = nll_loss(q, labels, train_mask)
    dY = (dq - np.sum(dq * q, axis=1, keepdims=True)) / np.maximum(s, 1e-12)
    k0, k1, k2 = kappas
    dlogits, dZinf = fuse_backward(fw.logits, cfg.rho, k0 * dY)
    dZinf = dZinf + k1 * dY
    inside = (fw.Zr >= 0.0) & (fw.Zr <= 1.0)
    dZr = k2 * dY * inside
    if fw.diffusion is not None:
        dZr = dZr + diffusion_backward(fw.diffusion, op_prop, cfg.gamma, dZinf)
    else:
        dZr = dZr + dZinf * inside
    if fw.residual is not None:
        sign = -1.0 if cfg.residual_mode == "error" else 1.0
        dR = reintegrate_backward(fw.residual, train_mask, dZr, sign=sign)
        dc, _ = propagate_residual_backward(fw.residual, ctx.A_clip, fw.c, dR)
        dc = dc * (fw.c_raw < cfg.ceiling)
        confidence_backward(fw.conf_in, fw.c_raw, model.conf, dc)
    dZp = mlp_backward(model.head_spec, model.head, fw.head_cache, dlogits)
    if fw.attn_out is not None:
        dh = attention_backward(fw.attn_out, model.attn, dZp)
    else:
        dh = np.asarray(op_prop.values.T @ dZp)
    mlp_backward(model.enc_spec, model.enc, fw.enc_cache, dh)
    return loss


def ssl_step(model: Model, ctx: Context, cfg: ExperimentConfig, rng, train_labels) -> float:
    """Two dropout views of the multi-scale input, contrasted through the projection head."""
    n = ctx.X_ms.shape[0]
    keep = 1.0 - cfg.aug_dropout
    views = []
    for _ in range(2):
        mask = (rng.random(ctx.X_ms.shape) < keep) / max(keep, 1e-12)
        h, ec = mlp_forward(model.enc_spec, model.enc, ctx.X_ms * mask)
        z, pc = mlp_forward(model.proj_spec, model.proj, h)
        views.append((z, ec, pc))
    (z1, ec1, pc1), (z2, ec2, pc2) = views
    anchors = np.sort(rng.choice(n, size=min(cfg.batch, n), replace=False))
    neg_seed = int(rng.integers(2 ** 31))
    negs = []
    for a in anchors:
        k = cfg.negatives
        pool = n - 1 - ctx.g.degrees()[a]
        if train_labels[a] >= 0:
            pool -= int(np.sum(train_labels == train_labels[a])) - 1
        k = min(k, max(pool, 0))
        negs.append(np.zeros(0, dtype=np.int64) if k == 0 else
                    sample_negatives(ctx.g, z1, int(a), k, neg_seed, train_labels, anchors))
    loss, (da, dp) = contrastive_loss(z1[anchors], z2, negs, cfg.tau, positive_index=anchors)
    da_full = np.zeros_like(z1)
    da_full[anchors] = da
    w = cfg.lambda_ssl
    dh1 = mlp_backward(model.proj_spec, model.proj, pc1, w * da_full)
    mlp_backward(model.enc_spec, model.enc, ec1, dh1)
    dh2 = mlp_backward(model.proj_spec, model.proj, pc2, w * dp)
    mlp_backward(model.enc_spec, model.enc, ec2, dh2)
    return loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    cfg: ExperimentConfig
    seed: int
    g: SparseGraph
    split: Split
    model: Model
    ctx: Context
    gan: Optional[adv.AdversarialTopology]
    kappas: np.ndarray
    report: MetricReport
    diagnostics: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    kappa_trace: list = field(default_factory=list)
    clip_report: Optional[ClipReport] = None
    residual: Optional[ResidualState] = None
    predictions: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None


def _op_prop(gan, ctx, cfg):
    if gan is not None:
        return gan.perturbed_operator(renormalize=True)
    return ctx.A_norm


def run_training(cfg: ExperimentConfig, seed: Optional[int] = None, g: Optional[SparseGraph] = None,
                 write: bool = False) -> TrainResult:
    """Joint training for ``cfg.epochs`` epochs, then inference on the clean graph."""
    seed = cfg.seeds[0] if seed is None else int(seed)
    graph_seq, split_seq, model_seq, gan_seq, loop_seq = np.random.SeedSequence(seed).spawn(5)
    if g is None:
        g = load_graph(cfg, int(graph_seq.generate_state(1)[0]))
    if g.labels is None or g.n_classes < 2:
        raise ValueError("training needs labels with at least two classes")
    temporal = cfg.enabled("temporal")
    if temporal and g.timestamps is None:
        raise ValueError("temporal mode needs node timestamps")
    split = make_split(g, cfg, int(split_seq.generate_state(1)[0]))
    C = g.n_classes
    labels = np.where(g.labeled_mask, g.labels, 0)
    Y_train = one_hot(labels, split.train, C)
    train_labels = np.where(split.train, g.labels, -1)
    d_edge = g.edge_features.shape[1] if (g.edge_features is not None and cfg.enabled("edge_features")) else None
    model = build_model(cfg, g.features.shape[1], C, int(model_seq.generate_state(1)[0]), temporal, d_edge)
    ctx = make_context(g, model, cfg)
    use_gan = cfg.enabled("adversarial") and cfg.epochs > 0
    gan = None
    if use_gan:
        gcfg = adv.GanConfig(cfg.delta, cfg.critic_steps, cfg.gp_coeff, cfg.lr_gan, cfg.weight_decay,
                             cfg.gen_hidden, cfg.disc_hidden, cfg.disc_layers, cfg.with_self_loops)
        gan = adv.AdversarialTopology(g, _standardize(g.features), gcfg, int(gan_seq.generate_state(1)[0]))
    rng = np.random.default_rng(loop_seq)
    kappas = np.asarray(cfg.kappas, dtype=np.float64)
    result = TrainResult(cfg, seed, g, split, model, ctx, gan, kappas, MetricReport())

    for epoch in range(cfg.epochs):
        for b in model.blocks():
            b.zero_grad()
        l_ssl = ssl_step(model, ctx, cfg, rng, train_labels) if cfg.enabled("ssl") else 0.0
        # spectral safeguard on the clean operator, re-estimated every epoch
        A_clip, report = spectral_clip(ctx.A_norm, cfg.epsilon, norm_iters=cfg.norm_iters)
        ctx.A_clip = A_clip
        if gan is not None:
            diag = gan.epoch()
            result.diagnostics.append(diag)
        op_prop = _op_prop(gan, ctx, cfg)
        fw = forward(model, ctx, cfg, split.train, Y_train, op_prop, kappas, rng=rng, record=True)
        result.kappa_trace.append(fw.kappa)
        result.clip_report = replace(report, kappa_before=float(np.max(fw.c_raw)) * report.nu_before,
                                     kappa_after=fw.kappa)
        l_sup = supervised_backward(model, ctx, cfg, fw, split.train, labels, kappas, op_prop)
        total = l_sup + cfg.lambda_ssl * l_ssl
        if not math.isfinite(total):
            raise NonFiniteError("loss", f"epoch {epoch}")
        for b in model.blocks():
            _check_finite("optimizer", b.grads)
            adamw_step(b, cfg.lr_model, cfg.weight_decay)
        result.losses.append((l_sup, l_ssl, total))

    if cfg.fit_ensemble and split.val.any():
        fw = forward(model, ctx, cfg, split.train, Y_train, ctx.A_norm, kappas)
        kappas, _ = fit_kappas([fw.fused, fw.diffusion.Z_inf if fw.diffusion else fw.residual_only,
                                fw.residual_only], labels, split.val)
        result.kappas = kappas
    _finalize(result, Y_train, labels)
    if write:
        write_artifacts(result)
    return result


def _standardize(X):
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def infer(result: TrainResult, g: Optional[SparseGraph] = None, op_prop=None) -> Forward:
    """Deterministic inference with frozen parameters, on ``g`` (default: the training graph)."""
    cfg = result.cfg
    if g is None:
        ctx = result.ctx
    else:
        ctx = make_context(g, result.model, cfg)
    C = result.g.n_classes
    labels = np.where(result.g.labeled_mask, result.g.labels, 0)
    Y_train = one_hot(labels, result.split.train, C)
    op = ctx.A_norm if op_prop is None else op_prop
    return forward(result.model, ctx, cfg, result.split.train, Y_train, op, result.kappas)


def infer_mc(result: TrainResult, k: int, seed: int = 0) -> np.ndarray:
    """Average of ``k`` inferences on graphs with flips sampled from the generator."""
    gan = result.gan
    if gan is None or k < 1:
        return infer(result).final
    flips = gan.flips()
    p_eff, _ = gan.effective_p(flips)
    rng = np.random.default_rng(seed)
    acc = np.zeros((result.g.n_nodes, result.g.n_classes))
    for _ in range(k):
        hard = (rng.random(p_eff.size) < p_eff).astype(np.float64)
        op = adv.perturbed_adjacency(gan.A, flips, True, result.cfg.with_self_loops, p=hard)
        acc += infer(result, op_prop=op).final
    return acc / k


def _finalize(result: TrainResult, Y_train, labels) -> None:
    cfg = result.cfg
    fw = infer(result)
    preds = fw.final
    if cfg.mc_perturbations > 0:
        preds = infer_mc(result, cfg.mc_perturbations, result.seed)
    test = result.split.test
    rep = result.report
    rep.accuracy = accuracy(preds, labels, test)
    rep.roc_auc = macro_auc(normalized_rows(preds)[0], labels, test)
    rep.s_pair = s_pair(fw.Zp) if np.all(np.linalg.norm(fw.Zp, axis=1) > 0) else float("nan")
    g = result.g
    full, _, _ = complexity_estimate(g.n_nodes, g.n_edges, cfg.d_enc, cfg.T, cfg.critic_steps,
                                     cfg.negatives, cfg.heads, cfg.head_dim, cfg.gen_hidden)
    rep.c_epoch_estimate = full
    if result.gan is not None:
        op_p = result.gan.perturbed_operator(renormalize=True)
        if (op_p.values != result.ctx.A_norm.values).nnz:
            rep.gamma_sens = gamma_sens(lambda op, X: infer(result, op_prop=op).Zp,
                                        result.ctx.A_norm, op_p, None)
    result.residual = fw.residual
    result.predictions = preds
    result.embeddings = fw.Zp
    if result.clip_report is None:
        result.clip_report = replace(result.ctx.clip_report,
                                     kappa_before=float(np.max(fw.c_raw)) * result.ctx.clip_report.nu_before,
                                     kappa_after=fw.kappa)


def majority_baseline(result: TrainResult) -> float:
    y = result.g.labels[result.split.test]
    return float(np.bincount(y).max() / y.size)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def write_artifacts(result: TrainResult, out_dir=None) -> Path:
    out = Path(out_dir) if out_dir else result.cfg.resolve_output() / f"seed_{result.seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    with (out / "diagnostics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(adv.DIAG_FIELDS)
        for e, d in enumerate(result.diagnostics):
            w.writerow([e, repr(d.d_loss), repr(d.g_loss), repr(d.grad_norm_d), repr(d.grad_norm_g),
                        repr(d.flip_entropy)])
    with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        C = result.predictions.shape[1]
        w.writerow(["node_id"] + [f"p{k}" for k in range(C)] + ["argmax"])
        for i, row in enumerate(result.predictions):
            w.writerow([i] + [repr(float(v)) for v in row] + [int(row.argmax())])
    (out / "clip_report.json").write_text(result.clip_report.to_json() + "\n", encoding="utf-8")
    if result.residual is not None:
        result.residual.write_trace(out / "trace_residual.csv")
    else:
        (out / "trace_residual.csv").write_text("t,step_norm\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

PERTURBATIONS = (
    ("clean", 0.0, 0.0),
    ("del_5", 0.05, 0.0),
    ("del_10", 0.10, 0.0),
    ("add_5", 0.0, 0.05),
    ("add_10", 0.0, 0.10),
    ("hybrid_5_5", 0.05, 0.05),
)


@dataclass
class RobustnessRow:
    seed: int
    name: str
    n_edges: int
    auc: float
    delta_auc_pct: float
    r_abs: float
    r_rel: float


def robustness_rows(result: TrainResult, pert_seed: int) -> list:
    """Evaluate a trained model on structurally perturbed copies of its graph."""
    labels = np.where(result.g.labeled_mask, result.g.labels, 0)
    test = result.split.test
    clean = infer(result)
    auc_clean = macro_auc(normalized_rows(clean.final)[0], labels, test)
    rows = []
    for k, (name, d, a) in enumerate(PERTURBATIONS):
        if d == 0.0 and a == 0.0:
            fw = clean
            n_e = result.g.n_edges
        else:
            gp = perturb_edges(result.g, d, a, pert_seed * 100 + k)
            fw = infer(result, gp)
            n_e = gp.n_edges
        auc = macro_auc(normalized_rows(fw.final)[0], labels, test)
        r_abs, r_rel = embedding_shift(clean.Zp, fw.Zp)
        rows.append(RobustnessRow(result.seed, name, n_e, auc, delta_auc(auc, auc_clean), r_abs, r_rel))
    return rows


def run_robustness_suite(cfg: ExperimentConfig, results: Optional[list] = None) -> list:
    results = results or [run_training(cfg, s) for s in cfg.seeds]
    rows = []
    for r in results:
        rows += robustness_rows(r, r.seed)
    means = {name: float(np.mean([x.delta_auc_pct for x in rows if x.name == name]))
             for name, _, _ in PERTURBATIONS}
    if means["del_10"] > means["del_5"]:
        logger.warning("robustness ordering: mean dAUC del_10 %.4f > del_5 %.4f",
                       means["del_10"], means["del_5"])
    return rows


def mean_delta(rows, name) -> float:
    return float(np.mean([x.delta_auc_pct for x in rows if x.name == name]))


@dataclass
class CausalResult:
    pn: float
    ps: float
    counterfactual_delta: float
    table: np.ndarray
    full_auc: float
    per_run: list


def run_causal_suite(cfg: ExperimentConfig, result: TrainResult) -> CausalResult:
    """Treatment = keep the generator's soft flips; control = clean graph (do(T=0)).

    Parameters stay frozen. The full-model AUC comes from the treated inference on the
    training split; outcomes over ``causal_splits`` resampled test subsets count as
    adequate when within 1% of it.
    """
    labels = np.where(result.g.labeled_mask, result.g.labels, 0)
    test = result.split.test
    treated_op = (result.gan.perturbed_operator(renormalize=True) if result.gan is not None
                  else result.ctx.A_norm)
    with_edges = infer(result, op_prop=treated_op).final
    without = infer(result).final
    q1 = normalized_rows(with_edges)[0]
    q0 = normalized_rows(without)[0]
    cf = counterfactual_delta(q1, q0, labels, test)
    full_auc = macro_auc(q1, labels, test)
    rng = np.random.default_rng(result.seed)
    idx = np.flatnonzero(test)
    treated, control, per_run = [], [], []
    for s in range(cfg.causal_splits):
        sub = np.zeros_like(test)
        sub[rng.choice(idx, size=max(2, idx.size // 2), replace=False)] = True
        try:
            a1 = macro_auc(q1, labels, sub)
            a0 = macro_auc(q0, labels, sub)
        except ValueError:
            continue
        treated.append(a1)
        control.append(a0)
        per_run.append((s, a1, a0))
    table = outcome_table(full_auc, treated, control)
    pn, ps = pn_ps_bounds(table) if table[0].sum() and table[1].sum() else (0.0, 0.0)
    result.report.counterfactual_delta_auc = cf
    result.report.pn_lower = pn
    result.report.ps_lower = ps
    return CausalResult(pn, ps, cf, table, full_auc, per_run)


SENSITIVITY = {"delta": (0.05, 0.20), "T": (10, 50), "gamma": (0.3, 0.8)}


def sensitivity_configs(cfg: ExperimentConfig) -> list:
    """One-factor-at-a-time variations around ``cfg`` (the defaults row first)."""
    out = [("default", cfg)]
    for key, values in SENSITIVITY.items():
        for v in values:
            if getattr(cfg, key) != v:
                out.append((f"{key}={v}", replace(cfg, **{key: v})))
    return out


def run_sensitivity_grid(cfg: ExperimentConfig) -> list:
    rows = []
    for name, c in sensitivity_configs(cfg):
        accs, aucs = [], []
        for s in c.seeds:
            r = run_training(c, s)
            accs.append(r.report.accuracy)
            aucs.append(r.report.roc_auc)
        rows.append(dict(config=name, delta=c.delta, T=c.T, gamma=c.gamma,
                         acc_mean=float(np.mean(accs)), acc_std=float(np.std(accs)),
                         auc_mean=float(np.mean(aucs)), auc_std=float(np.std(aucs)),
                         seeds=" ".join(map(str, c.seeds)), config_hash=c.config_hash()))
    return rows


def write_rows(rows, path) -> None:
    rows = [r if isinstance(r, dict) else r.__dict__ for r in rows]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
