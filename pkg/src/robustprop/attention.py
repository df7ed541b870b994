"""Neighbourhood multi-head attention with a learned pairwise structural bias.

Logits per directed pair ``(i, j)`` and head ``h``::

    psi = q_i . k_j / sqrt(d_h) + w . tanh(W_b [x_i || x_j] + b_b)  [+ temporal term]

normalised by a softmax over the neighbours of ``i``; the bias term is shared by all heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .nn import ParamBlock, sigmoid
from .residual import ConfidenceVector, _open_unit, neighbor_mean

# block indices of the attention parameters
WQ, WK, WV, WB, BB, WBIAS = range(6)
TEMPORAL_OFFSET = 6
# entries of a temporal bias block (relative to its offset)
T_W, T_V, T_SCALE, T_RATE = range(4)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    head_dim: int = 64
    dropout: float = 0.1
    bias_hidden: Optional[int] = None
    temporal: bool = False
    temporal_hidden: int = 16
    support_threshold: float = 1e-3

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def hidden(self) -> int:
        return self.bias_hidden or self.head_dim

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


def temporal_shapes(d: int, hidden: int) -> list:
    return [(2 * d + 1, hidden), (hidden, 1), (1,), (1,)]


def attention_params(d: int, cfg: AttentionConfig, seed: int = 0, d_bias: Optional[int] = None) -> ParamBlock:
    db = d if d_bias is None else d_bias
    shapes = [(d, cfg.width), (d, cfg.width), (d, cfg.width),
              (2 * db, cfg.hidden), (cfg.hidden,), (cfg.hidden, 1)]
    if cfg.temporal:
        shapes += temporal_shapes(db, cfg.temporal_hidden)
    block = ParamBlock.create(shapes, seed)
    if cfg.temporal:
        _init_kernel(block, TEMPORAL_OFFSET)
    return block


def temporal_params(d: int, hidden: int = 16, seed: int = 0) -> ParamBlock:
    block = ParamBlock.create(temporal_shapes(d, hidden), seed)
    _init_kernel(block, 0)
    return block


def _init_kernel(block, off):
    block.view(off + T_SCALE)[0] = 1.0
    block.view(off + T_RATE)[0] = 0.1


def pair_lists(support):
    """Directed ``(rows, cols)`` of a graph's adjacency or a sparse support matrix (CSR order)."""
    if hasattr(support, "adjacency"):
        M = support.adjacency()
    else:
        M = sp.csr_array(getattr(support, "values", support))
    M = sp.csr_array(M)
    M.sort_indices()
    rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    return rows, M.indices.astype(np.int64), M.shape[0]


def thresholded_support(op, threshold: float = 1e-3) -> sp.csr_array:
    M = sp.csr_array(getattr(op, "values", op)).copy()
    M.data = np.where(np.abs(M.data) > threshold, 1.0, 0.0)
    M.eliminate_zeros()
    M.sort_indices()
    return M


def segment_softmax(logits, rows, n):
    """Softmax of ``logits`` (E x H) within groups sharing the same ``rows`` entry."""
    H = logits.shape[1]
    mx = np.full((n, H), -np.inf)
    np.maximum.at(mx, rows, logits)
    e = np.exp(logits - mx[rows])
    return e / _segment_sum(e, rows, n)[rows]


def _segment_sum(vals, rows, n):
    """Sum rows of ``vals`` that share an index in ``rows`` (sparse incidence product)."""
    E = len(rows)
    S = sp.csr_array((np.ones(E), (rows, np.arange(E))), shape=(n, E))
    flat = vals.reshape(E, int(np.prod(vals.shape[1:])))
    return np.asarray(S @ flat).reshape((n,) + vals.shape[1:])


# ---------------------------------------------------------------------------
# Temporal pieces
# ---------------------------------------------------------------------------

def _kernel(params, off, dt):
    scale = params.view(off + T_SCALE)[0]
    rate = params.view(off + T_RATE)[0]
    ex = np.exp(-rate * np.abs(dt))
    return scale * ex, ex


def _temporal_forward(params, off, xi, xj, dt):
    gk, ex = _kernel(params, off, dt)
    inp = np.concatenate([xi, xj, gk[:, None]], axis=1)
    hid = np.tanh(inp @ params.view(off + T_W))
    out = hid @ params.view(off + T_V)[:, 0]
    return out, (inp, hid, ex, dt)


def _temporal_backward(params, off, cache, dout):
    inp, hid, ex, dt = cache
    params.grad(off + T_V)[:, 0] += hid.T @ dout
    dpre = dout[:, None] * params.view(off + T_V)[:, 0][None, :] * (1.0 - hid * hid)
    params.grad(off + T_W)[...] += inp.T @ dpre
    dinp = dpre @ params.view(off + T_W).T
    dg = dinp[:, -1]
    scale = params.view(off + T_SCALE)[0]
    params.grad(off + T_SCALE)[0] += np.sum(dg * ex)
    params.grad(off + T_RATE)[0] += np.sum(dg * scale * ex * -np.abs(dt))
    d = (inp.shape[1] - 1) // 2
    return dinp[:, :d], dinp[:, d:2 * d]


def temporal_attention_bias(psi, x_i, x_j, tau_i, tau_j, params: ParamBlock, offset: int = 0):
    """``psi + v . tanh(W [x_i || x_j || g(|tau_i - tau_j|)])`` with
    ``g(t) = scale * exp(-rate * t)``. Vectorised over leading rows."""
    xi = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    xj = np.atleast_2d(np.asarray(x_j, dtype=np.float64))
    dt = np.atleast_1d(np.asarray(tau_i, dtype=np.float64) - np.asarray(tau_j, dtype=np.float64))
    add, _ = _temporal_forward(params, offset, xi, xj, dt)
    out = np.asarray(psi, dtype=np.float64) + (add if np.ndim(psi) else add[0])
    return out


def temporal_confidence(g, X, params: ParamBlock, tau_now: float) -> ConfidenceVector:
    """``sigmoid(w_c . [x_i || mean_j x_j || tau_now - tau_i] + b_c)``."""
    if g.timestamps is None:
        raise ValueError("temporal confidence needs node timestamps")
    inputs = temporal_confidence_inputs(g, X, tau_now)
    z = inputs @ params.view(0)[:, 0] + params.view(1)[0]
    return ConfidenceVector(_open_unit(sigmoid(z)))


def temporal_confidence_inputs(g, X, tau_now):
    X = np.asarray(X, dtype=np.float64)
    dt = float(tau_now) - g.timestamps
    return np.concatenate([X, neighbor_mean(g, X), dt[:, None]], axis=1)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AttentionOutput:
    Z: np.ndarray
    omega: np.ndarray           # E x H, weights after softmax (before dropout)
    rows: np.ndarray
    cols: np.ndarray
    empty: np.ndarray           # nodes without neighbours
    _cache: dict = field(default=None, repr=False)

    def weights_for(self, i: int):
        sel = self.rows == i
        return self.cols[sel], self.omega[sel]


def attention_forward(support, X, params: ParamBlock, cfg: AttentionConfig, Xb=None,
                      timestamps=None, rng: Optional[np.random.Generator] = None) -> AttentionOutput:
    """Multi-head neighbourhood attention over the pairs of ``support``.

    ``Xb`` feeds the structural bias (defaults to ``X``). ``rng`` switches on dropout
    of the attention weights; without it the pass is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    Xb = X if Xb is None else np.asarray(Xb, dtype=np.float64)
    rows, cols, n = pair_lists(support)
    H, dh = cfg.heads, cfg.head_dim
    Q = (X @ params.view(WQ)).reshape(n, H, dh)
    K = (X @ params.view(WK)).reshape(n, H, dh)
    V = (X @ params.view(WV)).reshape(n, H, dh)
    inv = 1.0 / np.sqrt(dh)
    psi = np.einsum("ehd,ehd->eh", Q[rows], K[cols]) * inv
    b_in = np.concatenate([Xb[rows], Xb[cols]], axis=1)
    b_hid = np.tanh(b_in @ params.view(WB) + params.view(BB))
    bias = b_hid @ params.view(WBIAS)[:, 0]
    psi = psi + bias[:, None]
    t_cache = None
    if cfg.temporal:
        if timestamps is None:
            raise ValueError("temporal attention needs timestamps")
        ts = np.asarray(timestamps, dtype=np.float64)
        tb, t_cache = _temporal_forward(params, TEMPORAL_OFFSET, Xb[rows], Xb[cols],
                                        ts[rows] - ts[cols])
        psi = psi + tb[:, None]
    omega = segment_softmax(psi, rows, n) if len(rows) else np.zeros((0, H))
    keep = None
    w_eff = omega
    if rng is not None and cfg.dropout > 0:
        keep = (rng.random(omega.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        w_eff = omega * keep
    Z = _segment_sum(w_eff[:, :, None] * V[cols], rows, n).reshape(n, H * dh)
    deg = np.bincount(rows, minlength=n)
    cache = dict(X=X, Xb=Xb, Q=Q, K=K, V=V, b_in=b_in, b_hid=b_hid, keep=keep, w_eff=w_eff,
                 t_cache=t_cache, cfg=cfg, n=n)
    return AttentionOutput(Z, omega, rows, cols, np.flatnonzero(deg == 0), cache)


def attention_backward(out: AttentionOutput, params: ParamBlock, dZ, return_bias_input: bool = False):
    """Accumulate parameter gradients; return d(loss)/dX (and d/dXb when it is separate)."""
    c = out._cache
    if c is None:
        raise RuntimeError("attention backward needs a cached forward pass")
    cfg, n = c["cfg"], c["n"]
    H, dh = cfg.heads, cfg.head_dim
    rows, cols = out.rows, out.cols
    X, Xb, Q, K, V = c["X"], c["Xb"], c["Q"], c["K"], c["V"]
    G = np.asarray(dZ, dtype=np.float64).reshape(n, H, dh)
    Gi = G[rows]
    dw_eff = np.einsum("ehd,ehd->eh", Gi, V[cols])
    dV = _segment_sum(c["w_eff"][:, :, None] * Gi, cols, n)
    dw = dw_eff if c["keep"] is None else dw_eff * c["keep"]
    om = out.omega
    dpsi = om * (dw - _segment_sum(om * dw, rows, n)[rows])
    inv = 1.0 / np.sqrt(dh)
    dQ = _segment_sum(dpsi[:, :, None] * K[cols] * inv, rows, n)
    dK = _segment_sum(dpsi[:, :, None] * Q[rows] * inv, cols, n)
    dbias = dpsi.sum(axis=1)

    b_hid = c["b_hid"]
    params.grad(WBIAS)[:, 0] += b_hid.T @ dbias
    dpre = dbias[:, None] * params.view(WBIAS)[:, 0][None, :] * (1.0 - b_hid * b_hid)
    params.grad(WB)[...] += c["b_in"].T @ dpre
    params.grad(BB)[...] += dpre.sum(axis=0)
    db_in = dpre @ params.view(WB).T
    db = Xb.shape[1]
    dXb = _segment_sum(db_in[:, :db], rows, n) + _segment_sum(db_in[:, db:], cols, n)
    if c["t_cache"] is not None:
        dxi, dxj = _temporal_backward(params, TEMPORAL_OFFSET, c["t_cache"], dbias)
        dXb += _segment_sum(dxi, rows, n) + _segment_sum(dxj, cols, n)

    dQ, dK, dV = (m.reshape(n, H * dh) for m in (dQ, dK, dV))
    params.grad(WQ)[...] += X.T @ dQ
    params.grad(WK)[...] += X.T @ dK
    params.grad(WV)[...] += X.T @ dV
    dX = dQ @ params.view(WQ).T + dK @ params.view(WK).T + dV @ params.view(WV).T
    if Xb is X:
        return dX + dXb
    return (dX, dXb) if return_bias_input else dX
