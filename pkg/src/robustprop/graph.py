"""Sparse graph container, adjacency normalization and graph generators.

Graphs are undirected and stored as a canonical edge list ``(i, j)`` with ``i < j``.
Self-loops are never stored; normalization adds them on request.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .exceptions import GraphFormatError
from .linalg import largest_singular_value, sym_normalize

logger = logging.getLogger(__name__)

# Convergence settings used for the cached norm of freshly built operators.
NORM_ITERS = 2000
NORM_TOL = 1e-13


def _readonly(a):
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Immutable undirected attributed graph.

    ``labels`` holds a class id per node, ``-1`` where unknown; ``labeled_mask`` is
    ``labels >= 0``. ``edge_features`` rows align with ``edges``.
    """

    n_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    n_classes: int = 0
    edge_features: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = None
    _adj: sp.csr_array = field(init=False, repr=False)

    def __post_init__(self):
        if self.features.shape[0] != self.n_nodes:
            raise ValueError(
                f"feature rows ({self.features.shape[0]}) != n_nodes ({self.n_nodes})")
        if self.labels is not None and self.labels.shape != (self.n_nodes,):
            raise ValueError("labels must have one entry per node")
        if self.timestamps is not None and self.timestamps.shape != (self.n_nodes,):
            raise ValueError("timestamps must have one entry per node")
        if self.edge_features is not None and self.edge_features.shape[0] != len(self.edges):
            raise ValueError("edge_features rows must align with edges")
        n = self.n_nodes
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_array((data, (rows, cols)), shape=(n, n))
        adj.sort_indices()
        object.__setattr__(self, "_adj", adj)
        for name in ("edges", "features", "labels", "edge_features", "timestamps"):
            _readonly(getattr(self, name))

    @classmethod
    def from_edges(cls, n_nodes, edges, features, labels=None, n_classes=None,
                   edge_features=None, timestamps=None) -> "SparseGraph":
        """Canonicalize ``edges`` (orient ``i < j``, sort, deduplicate) and build a graph."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= n_nodes):
            raise ValueError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ValueError("self-loops are not stored; normalization adds them")
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        key = lo * n_nodes + hi
        _, first = np.unique(key, return_index=True)
        canon = np.stack([lo[first], hi[first]], axis=1) if len(e) else np.zeros((0, 2), np.int64)
        ef = None
        if edge_features is not None:
            ef = np.asarray(edge_features, dtype=np.float64).reshape(len(e), -1)[first].copy()
        feats = np.array(features, dtype=np.float64).reshape(n_nodes, -1)
        lab = None
        if labels is not None:
            lab = np.array(labels, dtype=np.int64)
            if n_classes is None:
                n_classes = int(lab.max()) + 1 if np.any(lab >= 0) else 0
            if np.any(lab >= n_classes):
                raise ValueError("label id out of range")
        ts = None if timestamps is None else np.array(timestamps, dtype=np.float64)
        return cls(int(n_nodes), canon, feats, lab, int(n_classes or 0), ef, ts)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def labeled_mask(self) -> Optional[np.ndarray]:
        if self.labels is None:
            return None
        return self.labels >= 0

    def adjacency(self) -> sp.csr_array:
        """Symmetric binary adjacency (a fresh copy)."""
        return self._adj.copy()

    def degrees(self) -> np.ndarray:
        return np.diff(self._adj.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self._adj.indices[self._adj.indptr[i]:self._adj.indptr[i + 1]]

    def edge_set(self) -> set:
        return set(map(tuple, self.edges.tolist()))

    def with_edges(self, edges) -> "SparseGraph":
        """Same nodes and attributes, new edge set.

        Edge features of surviving edges are kept; new edges get zero feature vectors.
        """
        new = SparseGraph.from_edges(self.n_nodes, edges, self.features)
        ef = None
        if self.edge_features is not None:
            old = {tuple(p): k for k, p in enumerate(self.edges.tolist())}
            ef = np.zeros((new.n_edges, self.edge_features.shape[1]))
            for k, p in enumerate(new.edges.tolist()):
                j = old.get(tuple(p))
                if j is not None:
                    ef[k] = self.edge_features[j]
        return replace(self, edges=new.edges, edge_features=ef)

    def with_features(self, features) -> "SparseGraph":
        return replace(self, features=np.array(features, dtype=np.float64))


class Provenance(str, enum.Enum):
    RAW = "raw"
    CLIPPED = "clipped"
    PERTURBED = "perturbed"
    PERTURBED_RENORMALIZED = "perturbed_renormalized"


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    """Sparse N x N propagation matrix with a cached spectral-norm estimate."""

    values: sp.csr_array
    norm_estimate: float
    provenance: Provenance = Provenance.RAW
    self_loops: bool = True

    def __post_init__(self):
        if self.values.nnz and not np.all(np.isfinite(self.values.data)):
            raise ValueError("operator entries must be finite")
        if self.norm_estimate < 0:
            raise ValueError("norm_estimate must be non-negative")

    @property
    def shape(self):
        return self.values.shape

    def __matmul__(self, other):
        return self.values @ other

    def todense(self) -> np.ndarray:
        return self.values.toarray()

    @classmethod
    def from_matrix(cls, matrix, provenance=Provenance.RAW, self_loops=False,
                    norm_iters=NORM_ITERS, seed=0) -> "PropagationOperator":
        m = sp.csr_array(matrix, dtype=np.float64)
        m.eliminate_zeros()
        m.sort_indices()
        nu, _ = largest_singular_value(m, norm_iters, seed, NORM_TOL)
        return cls(m, nu, Provenance(provenance), self_loops)


def normalize_adjacency(g: SparseGraph, with_self_loops: bool = True,
                        norm_iters: int = NORM_ITERS, seed: int = 0) -> PropagationOperator:
    """Symmetric degree normalization ``D^{-1/2}(A [+ I])D^{-1/2}``.

    Isolated nodes (zero degree when ``with_self_loops`` is False) get a zero row.
    """
    values = sym_normalize(g.adjacency(), with_self_loops)
    nu, _ = largest_singular_value(values, norm_iters, seed, NORM_TOL)
    return PropagationOperator(values, nu, Provenance.RAW, with_self_loops)


def adjacency_operator(g: SparseGraph, norm_iters: int = NORM_ITERS,
                       seed: int = 0) -> PropagationOperator:
    """The raw binary adjacency wrapped as an operator (no normalization)."""
    return PropagationOperator.from_matrix(g.adjacency(), Provenance.RAW, False, norm_iters, seed)


def homophily_ratio(g: SparseGraph, return_excluded: bool = False):
    """Mean over nodes of the fraction of neighbors sharing the node's label.

    Nodes without neighbors or without a known label are excluded; the number of
    excluded nodes is logged and optionally returned.
    """
    if g.labels is None:
        raise ValueError("homophily needs labels")
    A = g._adj
    lab = g.labels
    deg = g.degrees()
    src = np.repeat(np.arange(g.n_nodes), deg)
    same = (lab[src] == lab[A.indices]) & (lab[A.indices] >= 0)
    known_nbr = np.bincount(src, weights=(lab[A.indices] >= 0).astype(float), minlength=g.n_nodes)
    same_cnt = np.bincount(src, weights=same.astype(float), minlength=g.n_nodes)
    ok = (known_nbr > 0) & (lab >= 0)
    excluded = int(g.n_nodes - ok.sum())
    if excluded:
        logger.info("homophily_ratio: %d node(s) excluded (isolated or unlabeled)", excluded)
    if not np.any(ok):
        raise ValueError("no node qualifies for the homophily ratio")
    h = float(np.mean(same_cnt[ok] / known_nbr[ok]))
    return (h, excluded) if return_excluded else h


def _round_count(rate: float, total: int) -> int:
    return int(math.floor(rate * total + 0.5))


def _non_edge_pool(g: SparseGraph) -> np.ndarray:
    n = g.n_nodes
    iu, ju = np.triu_indices(n, 1)
    key = iu * n + ju
    existing = g.edges[:, 0] * n + g.edges[:, 1]
    keep = ~np.isin(key, existing)
    return np.stack([iu[keep], ju[keep]], axis=1)


def sample_non_edges(g: SparseGraph, count: int, rng: np.random.Generator,
                     exclude=None) -> np.ndarray:
    """Uniform sample of ``count`` distinct non-edges (no self-loops), as ``(i<j)`` rows.

    Explicit enumeration below 10^4 nodes, rejection sampling above.
    """
    n = g.n_nodes
    available = n * (n - 1) // 2 - g.n_edges
    if count > available:
        raise ValueError(f"requested {count} non-edges but only {available} exist")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if n < 10_000:
        pool = _non_edge_pool(g)
        pick = rng.choice(len(pool), size=count, replace=False)
        return pool[np.sort(pick)]
    existing = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())
    if exclude is not None:
        existing |= set(exclude)
    chosen: list[int] = []
    seen = set()
    while len(chosen) < count:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        k = int(min(i, j) * n + max(i, j))
        if k in existing or k in seen:
            continue
        seen.add(k)
        chosen.append(k)
    ks = np.array(sorted(chosen), dtype=np.int64)
    return np.stack([ks // n, ks % n], axis=1)


def perturb_edges(g: SparseGraph, del_rate: float, add_rate: float, seed: int) -> SparseGraph:
    """Random structural noise: delete then add edges.

    Exactly ``round(del_rate*|E|)`` edges are removed and ``round(add_rate*|E|)``
    non-edges of the original graph are added (both counts relative to the original
    ``|E|``). Deletion and addition draw from independent child seeds.
    """
    for r in (del_rate, add_rate):
        if not 0.0 <= r <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
    n_del = _round_count(del_rate, g.n_edges)
    n_add = _round_count(add_rate, g.n_edges)
    if n_del == 0 and n_add == 0:
        return g
    del_seq, add_seq = np.random.SeedSequence(seed).spawn(2)
    keep = np.ones(g.n_edges, dtype=bool)
    if n_del:
        drop = np.random.default_rng(del_seq).choice(g.n_edges, size=n_del, replace=False)
        keep[drop] = False
    added = sample_non_edges(g, n_add, np.random.default_rng(add_seq))
    return g.with_edges(np.concatenate([g.edges[keep], added]))


def _decode_triangular(k: np.ndarray, s: int):
    """Map linear indices of the strict upper triangle of an s x s matrix to (i, j)."""
    i = s - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * s * (s - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - s * (s - 1) // 2 + (s - i) * ((s - i) - 1) // 2
    return i, j


def block_sizes(n: int, blocks: int) -> list[int]:
    base = n // blocks
    sizes = [base] * blocks
    sizes[-1] += n - base * blocks
    return sizes


def generate_sbm(n: int, blocks: int, p_intra: float, p_inter: float, feature_dim: int,
                 feature_noise: float, seed: int) -> SparseGraph:
    """Stochastic block model with block-mean + isotropic Gaussian node features.

    Each block pair draws its edge count from the binomial law and then a uniform
    subset of that many pairs, which matches independent Bernoulli edges.
    """
    if blocks < 1 or n < blocks:
        raise ValueError("need 1 <= blocks <= n")
    for p in (p_intra, p_inter):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    sizes = block_sizes(n, blocks)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    labels = np.repeat(np.arange(blocks), sizes)
    parts = []
    for a in range(blocks):
        for b in range(a, blocks):
            if a == b:
                s = sizes[a]
                pairs = s * (s - 1) // 2
                m = rng.binomial(pairs, p_intra) if pairs else 0
                if m:
                    k = rng.choice(pairs, size=m, replace=False)
                    i, j = _decode_triangular(k, s)
                    parts.append(np.stack([i + offsets[a], j + offsets[a]], axis=1))
            else:
                pairs = sizes[a] * sizes[b]
                m = rng.binomial(pairs, p_inter) if pairs else 0
                if m:
                    k = rng.choice(pairs, size=m, replace=False)
                    parts.append(np.stack([k // sizes[b] + offsets[a],
                                           k % sizes[b] + offsets[b]], axis=1))
    edges = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    means = rng.standard_normal((blocks, feature_dim))
    feats = means[labels] + feature_noise * rng.standard_normal((n, feature_dim))
    return SparseGraph.from_edges(n, edges, feats, labels, blocks)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def write_graph(g: SparseGraph, path) -> None:
    """Write the whitespace-separated text format (``nodes``/``edge``/``feat``/``label``/``time``)."""
    lines = [f"nodes {g.n_nodes} features {g.features.shape[1]} classes {g.n_classes}"]
    lines += [f"edge {i} {j}" for i, j in g.edges.tolist()]
    for i, row in enumerate(g.features):
        lines.append("feat %d %s" % (i, " ".join(repr(float(v)) for v in row)))
    if g.labels is not None:
        lines += [f"label {i} {c}" for i, c in enumerate(g.labels.tolist()) if c >= 0]
    if g.timestamps is not None:
        lines += [f"time {i} {float(t)!r}" for i, t in enumerate(g.timestamps)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph(path) -> SparseGraph:
    text = Path(path).read_text(encoding="utf-8")
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "nodes" or len(rows[0]) != 6:
        raise GraphFormatError("first line must be 'nodes N features D classes C'")
    head = rows[0]
    try:
        n, d, c = int(head[1]), int(head[3]), int(head[5])
    except ValueError as exc:
        raise GraphFormatError(f"bad header: {' '.join(head)}") from exc
    edges, feats = [], np.zeros((n, d))
    labels = np.full(n, -1, dtype=np.int64)
    times = None
    seen_feat = np.zeros(n, dtype=bool)
    for lineno, r in enumerate(rows[1:], start=2):
        tag = r[0]
        try:
            if tag == "edge":
                edges.append((int(r[1]), int(r[2])))
            elif tag == "feat":
                if len(r) != d + 2:
                    raise GraphFormatError(f"line {lineno}: expected {d} feature values")
                i = int(r[1])
                feats[i] = [float(v) for v in r[2:]]
                seen_feat[i] = True
            elif tag == "label":
                labels[int(r[1])] = int(r[2])
            elif tag == "time":
                if times is None:
                    times = np.zeros(n)
                times[int(r[1])] = float(r[2])
            else:
                raise GraphFormatError(f"line {lineno}: unknown record '{tag}'")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"line {lineno}: {' '.join(r)}") from exc
    if d and not seen_feat.all():
        raise GraphFormatError("every node needs a 'feat' line")
    try:
        return SparseGraph.from_edges(n, edges, feats, labels, c, timestamps=times)
    except ValueError as exc:
        raise GraphFormatError(str(exc)) from exc
