"""Edge-to-node feature aggregation and multi-scale propagated embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import as_operator
from .nn import ParamBlock, gelu


@dataclass(frozen=True, eq=False)
class MultiScaleEmbedding:
    per_scale: tuple
    concatenated: np.ndarray
    K: int

    def __post_init__(self):
        d = self.per_scale[0].shape[1]
        if self.concatenated.shape[1] != (self.K + 1) * d:
            raise ValueError("concatenated width must be (K+1)*d")


def edge_params(d_e: int, d_out: int, seed: int = 0) -> ParamBlock:
    """Block holding ``W_e`` (d_e x d_out) and ``b_e``."""
    return ParamBlock.create([(d_e, d_out), (d_out,)], seed)


def mask_missing(v, missing=None):
    """Zero-impute entries flagged missing (NaN entries are always treated as missing)."""
    v = np.array(v, dtype=np.float64)
    flag = np.isnan(v)
    if missing is not None:
        flag |= np.asarray(missing, dtype=bool)
    v[flag] = 0.0
    return v


def aggregate_edge_features(g, params: ParamBlock, missing=None) -> np.ndarray:
    """``x_i = GeLU(M(mean_j (W_e e_ij + b_e)))`` over the neighbours ``j`` of ``i``.

    Each undirected edge contributes its feature vector to both endpoints. Nodes with
    no neighbours aggregate to the zero vector.
    """
    if g.edge_features is None:
        raise ValueError("graph has no edge features")
    W, b = params.view(0), params.view(1)
    ef = np.nan_to_num(g.edge_features, nan=0.0)
    msg = ef @ W + b
    n = g.n_nodes
    src = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    inc = sp.csr_array((np.ones(len(src)), (src, np.tile(np.arange(g.n_edges), 2))),
                       shape=(n, g.n_edges))
    deg = np.asarray(inc.sum(axis=1)).ravel()
    v = inc @ msg
    v[deg > 0] /= deg[deg > 0, None]
    return gelu(mask_missing(v, missing))


def multi_scale(op, X, K: int = 3) -> MultiScaleEmbedding:
    """``X^(k) = op X^(k-1)`` for k = 1..K, concatenated in ascending k."""
    if K < 0:
        raise ValueError("K must be >= 0")
    M = as_operator(op)
    X = np.asarray(X, dtype=np.float64)
    scales = [X]
    for _ in range(K):
        scales.append(np.asarray(M @ scales[-1]))
    return MultiScaleEmbedding(tuple(scales), np.concatenate(scales, axis=1), K)
