"""Edge-flip generator, degree-normalised critic, soft perturbed adjacency and WGAN-GP training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import PropagationOperator, Provenance, SparseGraph, sample_non_edges
from .linalg import largest_singular_value, sym_normalize
from .nn import (AdamW, MLPSpec, ParamBlock, bernoulli_entropy, mlp_backward, mlp_forward,
                 sigmoid)

logger = logging.getLogger(__name__)

COLLAPSE_NATS = 0.3
GRAD_CLIP = 1.0
_NORM_ITERS = 2000
_NORM_TOL = 1e-13


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FlipProbabilities:
    candidates: np.ndarray      # M x 2, i < j
    p: np.ndarray
    entropy: float = field(init=False)
    _cache: object = field(default=None, repr=False)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if not np.all(np.isfinite(self.p)) or np.any((self.p < 0) | (self.p > 1)):
            raise ValueError("flip probabilities must be finite and inside [0, 1]")
        self.entropy = float(np.mean(bernoulli_entropy(self.p))) if self.p.size else 0.0


def generator_spec(d_in: int, hidden: int = 64) -> MLPSpec:
    return MLPSpec((d_in, hidden, 1), "gelu", "none")


def generator_params(spec: MLPSpec, seed: int = 0, out_scale: float = 0.1) -> ParamBlock:
    """Glorot init with the output layer shrunk so flips start near 1/2."""
    block = ParamBlock.create(spec.shapes(), seed)
    block.view(2 * (spec.n_layers - 1))[...] *= out_scale
    return block


def pair_inputs(X, candidates, edge_values=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    parts = [X[candidates[:, 0]], X[candidates[:, 1]]]
    if edge_values is not None:
        parts.append(np.asarray(edge_values, dtype=np.float64).reshape(len(candidates), -1))
    return np.concatenate(parts, axis=1)


def generator_flip_probs(g, X, params: ParamBlock, candidates, spec: Optional[MLPSpec] = None,
                         edge_values=None) -> FlipProbabilities:
    """``P_ij = sigmoid(MLP([x_i || x_j || e_ij]))`` for each candidate pair."""
    cand = np.asarray(candidates, dtype=np.int64).reshape(-1, 2)
    inp = pair_inputs(X, cand, edge_values)
    if spec is None:
        spec = generator_spec(inp.shape[1], params.shapes[0][1])
    logits, cache = mlp_forward(spec, params, inp)
    p = sigmoid(logits[:, 0])
    return FlipProbabilities(cand, p, (spec, cache))


def generator_backward(flips: FlipProbabilities, params: ParamBlock, dP) -> None:
    spec, cache = flips._cache
    dlogit = (np.asarray(dP) * flips.p * (1.0 - flips.p))[:, None]
    mlp_backward(spec, params, cache, dlogit)


def candidate_pairs(g: SparseGraph, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """All edges plus an equally sized seeded sample of non-edges; returns (pairs, a_ij)."""
    rng = np.random.default_rng(seed)
    n_avail = g.n_nodes * (g.n_nodes - 1) // 2 - g.n_edges
    non = sample_non_edges(g, min(g.n_edges, n_avail), rng)
    pairs = np.concatenate([g.edges, non])
    a = np.concatenate([np.ones(g.n_edges), np.zeros(len(non))])
    return pairs, a


def budget_scale(p, delta: float, n_edges: int) -> float:
    """Factor capping the expected flipped mass ``sum(P)`` at ``delta * |E|``."""
    total = float(np.sum(p))
    if total <= 0.0:
        return 1.0
    return min(1.0, delta * n_edges / total)


# ---------------------------------------------------------------------------
# Soft perturbed adjacency
# ---------------------------------------------------------------------------

def soft_values(a, p):
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return a * (1.0 - p) + (1.0 - a) * p


def _adjacency_of(A_entries):
    if isinstance(A_entries, SparseGraph):
        return A_entries.adjacency()
    return sp.csr_array(getattr(A_entries, "values", A_entries), dtype=np.float64)


def soft_adjacency(A_entries, flips: FlipProbabilities, p=None) -> sp.csr_array:
    """Unnormalised ``A'``: candidate entries replaced by ``A(1-P) + (1-A)P``, symmetric."""
    A = _adjacency_of(A_entries)
    n = A.shape[0]
    cand = flips.candidates
    p = flips.p if p is None else np.asarray(p, dtype=np.float64)
    i, j = cand[:, 0], cand[:, 1]
    a = np.asarray(A[i, j]).ravel()
    new = soft_values(a, p)
    # average the two orientations when a pair appears twice
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    key = lo * n + hi
    uk, inv = np.unique(key, return_inverse=True)
    mean_new = np.bincount(inv, weights=new) / np.bincount(inv)
    ui, uj = uk // n, uk % n
    ua = np.asarray(A[ui, uj]).ravel()
    delta = mean_new - ua
    D = sp.csr_array((np.concatenate([delta, delta]),
                      (np.concatenate([ui, uj]), np.concatenate([uj, ui]))), shape=(n, n))
    out = sp.csr_array(A + D)
    out.eliminate_zeros()
    out.sort_indices()
    return out


def perturbed_adjacency(A_entries, flips: FlipProbabilities, renormalize: bool = True,
                        with_self_loops: bool = True, p=None, norm_iters: int = _NORM_ITERS,
                        seed: int = 0) -> PropagationOperator:
    """Soft perturbed adjacency, optionally degree-renormalised, with a fresh norm estimate."""
    Ap = soft_adjacency(A_entries, flips, p)
    if renormalize:
        values = sym_normalize(Ap, with_self_loops)
        prov = Provenance.PERTURBED_RENORMALIZED
    else:
        values = Ap
        prov = Provenance.PERTURBED
    nu, _ = largest_singular_value(values, norm_iters, seed, _NORM_TOL)
    return PropagationOperator(values, nu, prov, with_self_loops if renormalize else False)


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

def discriminator_params(d_in: int, hidden: int = 32, layers: int = 2, seed: int = 0) -> ParamBlock:
    shapes = []
    width = d_in
    for _ in range(layers):
        shapes.append((width, hidden))
        width = hidden
    shapes += [(hidden, 1), (1,)]
    return ParamBlock.create(shapes, seed)


def _layers(params: ParamBlock) -> int:
    return len(params.shapes) - 2


@dataclass(frozen=True, eq=False)
class CriticGraph:
    """Message weights ``a_ij d_i^{-1/2} d_j^{-1/2} / sqrt(|N(i)|)`` with fixed degrees."""

    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray        # raw adjacency values a_ij
    norm: np.ndarray           # per-pair normalisation factor
    n: int

    def matrix(self) -> sp.csr_array:
        return sp.csr_array((self.weights * self.norm, (self.rows, self.cols)), shape=(self.n, self.n))


def critic_graph(adj, degrees) -> CriticGraph:
    """Build critic messages from (soft) adjacency ``adj`` and reference ``degrees``.

    Nodes with zero reference degree send and receive nothing.
    """
    A = sp.csr_array(adj, dtype=np.float64)
    A.sort_indices()
    n = A.shape[0]
    deg = np.asarray(degrees, dtype=np.float64)
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    cols = A.indices.astype(np.int64)
    inv_sqrt = np.zeros(n)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    # D_ii^{-1/2} D_jj^{-1/2} / sqrt(|N(i)|) with |N(i)| the reference degree
    norm = inv_sqrt[rows] * inv_sqrt[cols] * inv_sqrt[rows]
    return CriticGraph(rows, cols, A.data.copy(), norm, n)


def discriminator_forward(graph: CriticGraph, H0, params: ParamBlock):
    """Score of a graph: ReLU message passing, node mean, linear readout. Returns (score, cache)."""
    M = graph.matrix()
    h = np.asarray(H0, dtype=np.float64)
    L = _layers(params)
    hs, hw, masks = [h], [], []
    for l in range(L):
        z = h @ params.view(l)
        pre = M @ z
        mask = pre > 0
        h = np.where(mask, pre, 0.0)
        hw.append(z)
        masks.append(mask)
        hs.append(h)
    pooled = h.mean(axis=0)
    score = float(pooled @ params.view(L)[:, 0] + params.view(L + 1)[0])
    return score, dict(M=M, hs=hs, hw=hw, masks=masks, graph=graph)


def discriminator_backward(cache, params: ParamBlock, dscore: float, want_edges: bool = False):
    """Accumulate parameter gradients for ``dscore * score``.

    Returns ``dH0`` and, with ``want_edges``, the gradient w.r.t. each raw adjacency value.
    """
    M, hs, hw, masks, graph = cache["M"], cache["hs"], cache["hw"], cache["masks"], cache["graph"]
    L = _layers(params)
    n = hs[0].shape[0]
    wr = params.view(L)[:, 0]
    params.grad(L)[:, 0] += dscore * hs[-1].mean(axis=0)
    params.grad(L + 1)[0] += dscore
    G = np.tile(dscore * wr / n, (n, 1))
    dw = np.zeros(len(graph.rows)) if want_edges else None
    MT = M.T
    for l in reversed(range(L)):
        Gp = G * masks[l]
        if want_edges:
            dw += np.einsum("ek,ek->e", Gp[graph.rows], hw[l][graph.cols]) * graph.norm
        dz = MT @ Gp
        params.grad(l)[...] += hs[l].T @ dz
        G = dz @ params.view(l).T
    return (G, dw) if want_edges else G


def input_gradient(graph: CriticGraph, H0, params: ParamBlock):
    """``d score / d H0`` together with the forward cache (ReLU masks)."""
    score, cache = discriminator_forward(graph, H0, params)
    scratch = params.copy()
    scratch.zero_grad()
    g = discriminator_backward(cache, scratch, 1.0)
    return g, cache


def gradient_penalty(graph: CriticGraph, H_hat, params: ParamBlock, coeff: float = 10.0,
                     accumulate: bool = True) -> tuple[float, float]:
    """``coeff (||d score/d H_hat||_F - 1)^2`` and its parameter gradient.

    With ReLU masks fixed the input gradient is linear in each weight matrix, so the
    second-order pass below runs the backward chain in reverse once more.
    """
    g, cache = input_gradient(graph, H_hat, params)
    norm = float(np.linalg.norm(g))
    penalty = coeff * (norm - 1.0) ** 2
    if not accumulate or coeff == 0.0 or norm == 0.0:
        return penalty, norm
    M, masks = cache["M"], cache["masks"]
    L = _layers(params)
    n = g.shape[0]
    wr = params.view(L)[:, 0]
    # replay the backward chain: Gs[l] is the gradient flowing into layer l's output
    Gs = [None] * (L + 1)
    Gs[L] = np.tile(wr / n, (n, 1))
    Ps = [None] * L
    MT = M.T
    for l in reversed(range(L)):
        Ps[l] = Gs[l + 1] * masks[l]
        Gs[l] = (MT @ Ps[l]) @ params.view(l).T
    Gam = 2.0 * coeff * (norm - 1.0) * g / norm
    for l in range(L):
        B = MT @ Ps[l]
        params.grad(l)[...] += Gam.T @ B
        Gam = masks[l] * ((M @ Gam) @ params.view(l))
    params.grad(L)[:, 0] += Gam.sum(axis=0) / n
    return penalty, norm


def wgan_gp_losses(real_score: float, fake_score: float, interp_grad_norm: float,
                   gp_coeff: float = 10.0) -> tuple[float, float]:
    if gp_coeff < 0:
        raise ValueError("gp_coeff must be non-negative")
    d_loss = fake_score - real_score + gp_coeff * (interp_grad_norm - 1.0) ** 2
    return float(d_loss), float(-fake_score)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GanDiagnostics:
    d_loss: float
    g_loss: float
    grad_norm_d: float
    grad_norm_g: float
    flip_entropy: float

    def __post_init__(self):
        if self.grad_norm_d < 0 or self.grad_norm_g < 0:
            raise ValueError("gradient norms are non-negative")

    @property
    def collapsed(self) -> bool:
        return self.flip_entropy < COLLAPSE_NATS


DIAG_FIELDS = ("epoch", "d_loss", "g_loss", "grad_norm_d", "grad_norm_g", "flip_entropy")


def append_diagnostics(path, epoch: int, diag: GanDiagnostics) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(DIAG_FIELDS)
        w.writerow([epoch] + [repr(float(v)) for v in asdict(diag).values()])


def perturbation_structure_metrics(g: SparseGraph, modified) -> tuple[float, float, float]:
    """Degree, feature-distance and label-crossing profile of a modified edge set.

    ``xi_d``: fraction of edges touching a node whose degree exceeds the median degree;
    ``xi_f``: mean Euclidean distance between endpoint features;
    ``xi_h``: fraction joining differently labelled nodes.
    """
    mod = np.asarray(modified, dtype=np.int64).reshape(-1, 2)
    if len(mod) == 0:
        raise ValueError("modified edge set is empty")
    if g.labels is None:
        raise ValueError("labels are required")
    deg = g.degrees()
    med = np.median(deg)
    i, j = mod[:, 0], mod[:, 1]
    xi_d = float(np.mean((deg[i] > med) | (deg[j] > med)))
    xi_f = float(np.mean(np.linalg.norm(g.features[i] - g.features[j], axis=1)))
    xi_h = float(np.mean(g.labels[i] != g.labels[j]))
    return xi_d, xi_f, xi_h


# ---------------------------------------------------------------------------
# Training loop state
# ---------------------------------------------------------------------------

@dataclass
class GanConfig:
    delta: float = 0.10
    critic_steps: int = 5
    gp_coeff: float = 10.0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    gen_hidden: int = 64
    disc_hidden: int = 32
    disc_layers: int = 2
    with_self_loops: bool = True


class AdversarialTopology:
    """Generator/critic pair over a fixed candidate set with a flip budget.

    The critic compares the clean graph (messages over ``A``, inputs ``S(A) H``) with the
    soft perturbed one (messages over ``A'``, inputs ``S(A') H``) where ``S`` uses the
    clean graph's degrees, so both views share a normalisation.
    """

    def __init__(self, g: SparseGraph, H, cfg: GanConfig, seed: int):
        self.g = g
        self.cfg = cfg
        self.H = np.asarray(H, dtype=np.float64)
        seqs = np.random.SeedSequence(seed).spawn(4)
        cand_seed, gen_seed, disc_seed, loop_seed = (int(s.generate_state(1)[0]) for s in seqs)
        self.candidates, self.a = candidate_pairs(g, cand_seed)
        self.edge_values = None
        if g.edge_features is not None:
            # existing edges carry their features, sampled non-edges zeros
            ef = np.zeros((len(self.candidates), g.edge_features.shape[1]))
            ef[:g.n_edges] = g.edge_features
            self.edge_values = ef
        d_in = 2 * self.H.shape[1] + (0 if self.edge_values is None else self.edge_values.shape[1])
        self.gen_spec = generator_spec(d_in, cfg.gen_hidden)
        self.gen = generator_params(self.gen_spec, gen_seed)
        self.disc = discriminator_params(self.H.shape[1], cfg.disc_hidden, cfg.disc_layers, disc_seed)
        self.opt = AdamW(cfg.lr, cfg.weight_decay, betas=(0.5, 0.9))
        self.rng = np.random.default_rng(loop_seed)
        A = g.adjacency()
        self.A = A
        self.deg = g.degrees().astype(np.float64)
        self.norm_deg = self.deg + (1.0 if cfg.with_self_loops else 0.0)
        self.real_graph = critic_graph(A, self.deg)
        self.real_H0 = self._smooth(A)
        self.last_flips: Optional[FlipProbabilities] = None
        self.final_layer_norms: list = []

    # inputs S(A) H with the clean normalisation
    def _smooth(self, adj):
        A = sp.csr_array(adj)
        if self.cfg.with_self_loops:
            A = A + sp.eye_array(A.shape[0], format="csr")
        inv = np.zeros_like(self.norm_deg)
        pos = self.norm_deg > 0
        inv[pos] = 1.0 / np.sqrt(self.norm_deg[pos])
        return inv[:, None] * np.asarray(A @ (inv[:, None] * self.H))

    def flips(self) -> FlipProbabilities:
        return generator_flip_probs(self.g, self.H, self.gen, self.candidates, self.gen_spec,
                                    self.edge_values)

    def effective_p(self, flips: FlipProbabilities):
        s = budget_scale(flips.p, self.cfg.delta, self.g.n_edges) if self.cfg.delta > 0 else 0.0
        return flips.p * s, s

    def _fake(self, flips):
        p_eff, s = self.effective_p(flips)
        Ap = soft_adjacency(self.A, flips, p_eff)
        return Ap, critic_graph(Ap, self.deg), self._smooth(Ap), s

    def critic_step(self):
        flips = self.flips()
        _, fake_graph, fake_H0, _ = self._fake(flips)
        self.disc.zero_grad()
        real, rc = discriminator_forward(self.real_graph, self.real_H0, self.disc)
        fake, fc = discriminator_forward(fake_graph, fake_H0, self.disc)
        discriminator_backward(rc, self.disc, -1.0)
        discriminator_backward(fc, self.disc, 1.0)
        u = self.rng.uniform()
        H_hat = u * self.real_H0 + (1.0 - u) * fake_H0
        _, gnorm = gradient_penalty(self.real_graph, H_hat, self.disc, self.cfg.gp_coeff)
        d_loss, _ = wgan_gp_losses(real, fake, gnorm, self.cfg.gp_coeff)
        norm = self.disc.clip_grad_norm(GRAD_CLIP)
        self.opt.step(self.disc)
        return d_loss, norm

    def generator_step(self):
        flips = self.flips()
        Ap, fake_graph, fake_H0, s = self._fake(flips)
        self.disc.zero_grad()
        fake, fc = discriminator_forward(fake_graph, fake_H0, self.disc)
        _, g_loss = wgan_gp_losses(0.0, fake, 1.0, 0.0)
        dH0, dw = discriminator_backward(fc, self.disc, -1.0, want_edges=True)
        self.disc.zero_grad()
        dP = self._adjacency_grad_to_p(fake_graph, dw, dH0, s)
        self.gen.zero_grad()
        generator_backward(flips, self.gen, dP)
        last = 2 * (self.gen_spec.n_layers - 1)
        self.final_layer_norms.append(self.gen.grad_norm([last, last + 1]))
        norm = self.gen.clip_grad_norm(GRAD_CLIP)
        self.opt.step(self.gen)
        return g_loss, norm

    def _adjacency_grad_to_p(self, fake_graph: CriticGraph, dw, dH0, s):
        n = self.g.n_nodes
        cand = self.candidates
        i, j = cand[:, 0], cand[:, 1]
        # message path: gradient per stored (row, col) entry
        lookup = sp.csr_array((dw, (fake_graph.rows, fake_graph.cols)), shape=(n, n))
        d_val = np.asarray(lookup[i, j]).ravel() + np.asarray(lookup[j, i]).ravel()
        # input path: H0 = D^{-1/2}(A' [+ I])D^{-1/2} H
        inv = np.zeros(n)
        pos = self.norm_deg > 0
        inv[pos] = 1.0 / np.sqrt(self.norm_deg[pos])
        Hs = inv[:, None] * self.H
        d_val += inv[i] * np.einsum("ed,ed->e", dH0[i], Hs[j])
        d_val += inv[j] * np.einsum("ed,ed->e", dH0[j], Hs[i])
        return (1.0 - 2.0 * self.a) * d_val * s

    def epoch(self) -> GanDiagnostics:
        d_losses, d_norms = [], []
        for _ in range(self.cfg.critic_steps):
            dl, dn = self.critic_step()
            d_losses.append(dl)
            d_norms.append(dn)
        g_loss, g_norm = self.generator_step()
        flips = self.flips()
        self.last_flips = flips
        if flips.entropy < COLLAPSE_NATS:
            logger.warning("flip entropy %.4f below collapse threshold", flips.entropy)
        for v, name in ((d_losses[-1], "critic"), (g_loss, "generator")):
            if not math.isfinite(v):
                from .exceptions import NonFiniteError
                raise NonFiniteError(name)
        return GanDiagnostics(d_losses[-1], g_loss, d_norms[-1], g_norm, flips.entropy)

    def perturbed_operator(self, renormalize: bool = True) -> PropagationOperator:
        flips = self.flips() if self.last_flips is None else self.last_flips
        p_eff, _ = self.effective_p(flips)
        return perturbed_adjacency(self.A, flips, renormalize, self.cfg.with_self_loops, p_eff)

    def modified_edges(self, threshold: float = 0.9) -> np.ndarray:
        flips = self.flips() if self.last_flips is None else self.last_flips
        return flips.candidates[flips.p > threshold]
