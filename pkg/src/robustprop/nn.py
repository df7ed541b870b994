"""Dense layers with hand-written gradients, losses, AdamW and a finite-difference auditor."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, ndtr

ACTIVATIONS = ("gelu", "relu", "tanh", "sigmoid", "none")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def gelu(x):
    """Exact GeLU, ``x * Phi(x)``."""
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    return expit(x)


def activate(name: str, x):
    if name == "gelu":
        return gelu(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return expit(x)
    if name == "none":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name: str, pre, post):
    """Derivative of the activation given pre-activation and output."""
    if name == "gelu":
        return gelu_grad(pre)
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    if name == "none":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p, upstream, axis=-1):
    """Gradient through a softmax given its output ``p``."""
    return p * (upstream - np.sum(upstream * p, axis=axis, keepdims=True))


def bernoulli_entropy(p) -> np.ndarray:
    """Per-entry entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return h


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(eq=False)
class ParamBlock:
    """Flat parameter vector with a paired gradient buffer.

    2-D shapes are weight matrices (Glorot-uniform init), 1-D shapes are biases (zero init).
    ``view(k)`` returns a writable reshaped view into ``values``; ``grad(k)`` into ``grads``.
    Optimizer moments and the step counter live here too so a block can be checkpointed.
    """

    shapes: list
    values: np.ndarray
    grads: np.ndarray
    init_seed: int = 0
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shapes = [tuple(int(d) for d in s) for s in self.shapes]
        size = sum(int(np.prod(s)) for s in self.shapes)
        if len(self.values) != size or len(self.grads) != size:
            raise ValueError("values/grads length does not match shapes")
        self._offsets = np.concatenate([[0], np.cumsum([int(np.prod(s)) for s in self.shapes])])
        if self.m is None:
            self.m = np.zeros(size)
        if self.v is None:
            self.v = np.zeros(size)

    @classmethod
    def create(cls, shapes, seed: int = 0) -> "ParamBlock":
        shapes = [tuple(s) for s in shapes]
        rng = np.random.default_rng(seed)
        parts = []
        for s in shapes:
            if len(s) == 2:
                parts.append(glorot_uniform(rng, s).ravel())
            else:
                parts.append(np.zeros(int(np.prod(s))))
        values = np.concatenate(parts) if parts else np.zeros(0)
        return cls(shapes, values, np.zeros_like(values), seed)

    def __len__(self):
        return len(self.values)

    def view(self, k: int) -> np.ndarray:
        return self.values[self._offsets[k]:self._offsets[k + 1]].reshape(self.shapes[k])

    def grad(self, k: int) -> np.ndarray:
        return self.grads[self._offsets[k]:self._offsets[k + 1]].reshape(self.shapes[k])

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy(self) -> "ParamBlock":
        return ParamBlock(list(self.shapes), self.values.copy(), self.grads.copy(),
                          self.init_seed, self.step, self.m.copy(), self.v.copy())

    def grad_norm(self, indices: Optional[Sequence[int]] = None) -> float:
        if indices is None:
            return float(np.linalg.norm(self.grads))
        return float(np.sqrt(sum(np.sum(self.grad(k) ** 2) for k in indices)))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale gradients to global norm ``max_norm``; return the pre-clip norm."""
        norm = float(np.linalg.norm(self.grads))
        if norm > max_norm > 0:
            self.grads *= max_norm / norm
        return norm

    def save(self, path) -> None:
        header = json.dumps({"shapes": [list(s) for s in self.shapes], "seed": self.init_seed,
                             "step": self.step})
        payload = struct.pack(f"<{len(self.values)}d", *self.values)
        Path(path).write_bytes(header.encode("utf-8") + b"\n" + payload)

    @classmethod
    def load(cls, path) -> "ParamBlock":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        values = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
        block = cls(header["shapes"], values, np.zeros_like(values), header["seed"])
        block.step = int(header["step"])
        return block


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """``layer_widths = [in, h1, ..., out]``; hidden layers use ``activation``."""

    layer_widths: tuple
    activation: str = "gelu"
    output_activation: str = "none"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(int(w) <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def shapes(self) -> list:
        out = []
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            out += [(a, b), (b,)]
        return out

    def act(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.activation


def mlp_forward(spec: MLPSpec, params: ParamBlock, x, offset: int = 0):
    """Affine-then-activation stack. Weight ``l`` is block entry ``offset + 2l``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {spec.layer_widths[0]}")
    cache = [x]
    h = x
    for l in range(spec.n_layers):
        pre = h @ params.view(offset + 2 * l) + params.view(offset + 2 * l + 1)
        h = activate(spec.act(l), pre)
        cache += [pre, h]
    return h, cache


def mlp_backward(spec: MLPSpec, params: ParamBlock, cache, upstream, offset: int = 0):
    """Accumulate parameter gradients into ``params.grads`` and return d(loss)/d(input)."""
    g = np.asarray(upstream, dtype=np.float64)
    for l in reversed(range(spec.n_layers)):
        h_in = cache[2 * l]
        pre, post = cache[2 * l + 1], cache[2 * l + 2]
        g = g * activate_grad(spec.act(l), pre, post)
        params.grad(offset + 2 * l)[...] += h_in.T @ g
        params.grad(offset + 2 * l + 1)[...] += g.sum(axis=0)
        g = g @ params.view(offset + 2 * l).T
    return g


class MLP:
    """Stateful wrapper that caches the last forward pass."""

    def __init__(self, spec: MLPSpec, params: Optional[ParamBlock] = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else ParamBlock.create(spec.shapes(), seed)
        self._cache = None

    def forward(self, x):
        out, self._cache = mlp_forward(self.spec, self.params, x)
        return out

    def backward(self, upstream):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return mlp_backward(self.spec, self.params, self._cache, upstream)


def forward_mlp(spec: MLPSpec, params: ParamBlock, x):
    return mlp_forward(spec, params, x)[0]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _normalize_rows(u, name):
    norms = np.linalg.norm(u, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"zero-norm row {int(bad[0])} in {name}; cosine undefined")
    return u / norms[:, None], norms


def _cosine_backward(u_hat, v_hat, cos, norm_u, g):
    """d cos(u, v) / du scaled by upstream ``g`` (broadcast over trailing axis)."""
    return (g[..., None] * (v_hat - cos[..., None] * u_hat)) / norm_u[..., None]


def contrastive_loss(anchors, positives, negatives_index, tau: float = 0.3,
                     positive_index=None):
    """Temperature-scaled cosine contrastive loss, averaged over anchors.

    Anchor ``i`` is scored against its positive, row ``positive_index[i]`` of ``positives``
    (default ``i``), and the positives of its sampled negatives. ``negatives_index`` is a
    list of index arrays into ``positives``, one per anchor (possibly empty).
    Returns ``(loss, (grad_anchors, grad_positives))``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = a.shape[0]
    pos = np.arange(n) if positive_index is None else np.asarray(positive_index, dtype=np.int64)
    if pos.shape != (n,) or a.shape[1:] != p.shape[1:] or (positive_index is None and a.shape != p.shape):
        raise ValueError("anchors and positives do not line up")
    if n == 0:
        return 0.0, (np.zeros_like(a), np.zeros_like(p))
    a_hat, a_norm = _normalize_rows(a, "anchors")
    p_hat, p_norm = _normalize_rows(p, "positives")
    k = max((len(ix) for ix in negatives_index), default=0)
    # column 0 is the positive, the rest are padded negatives
    idx = np.zeros((n, k + 1), dtype=np.int64)
    mask = np.zeros((n, k + 1), dtype=bool)
    idx[:, 0] = pos
    mask[:, 0] = True
    for i, ix in enumerate(negatives_index):
        ix = np.asarray(ix, dtype=np.int64)
        idx[i, 1:1 + len(ix)] = ix
        mask[i, 1:1 + len(ix)] = True
    cand = p_hat[idx]                              # n, k+1, d
    cos = np.einsum("nd,nkd->nk", a_hat, cand)
    logits = np.where(mask, cos / tau, -np.inf)
    w = softmax(logits, axis=1)
    w = np.where(mask, w, 0.0)
    lse = np.log(np.sum(np.where(mask, np.exp(logits - logits.max(axis=1, keepdims=True)), 0.0),
                        axis=1)) + logits.max(axis=1)
    loss = float(np.mean(lse - logits[:, 0]))

    # d loss / d cos
    dcos = w.copy()
    dcos[:, 0] -= 1.0
    dcos /= tau * n
    da = np.einsum("nk,nkd->nd", dcos, cand)
    da = (da - np.sum(da * a_hat, axis=1, keepdims=True) * a_hat) / a_norm[:, None]
    # gradient wrt each candidate unit vector, scattered back to positives
    dcand_hat = dcos[..., None] * a_hat[:, None, :]
    dp_hat = np.zeros_like(p)
    np.add.at(dp_hat, idx[mask], dcand_hat[mask])
    dp = (dp_hat - np.sum(dp_hat * p_hat, axis=1, keepdims=True) * p_hat) / p_norm[:, None]
    return loss, (da, dp)


def nll_loss(probs, labels, mask, eps: float = 1e-12):
    """Mean negative log-likelihood on masked rows and its gradient w.r.t. ``probs``."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0.0, np.zeros_like(probs)
    p = probs[idx, labels[idx]]
    loss = float(-np.mean(np.log(np.maximum(p, eps))))
    grad = np.zeros_like(probs)
    grad[idx, labels[idx]] = -1.0 / (np.maximum(p, eps) * idx.size)
    return loss, grad


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

def sample_negatives(g, embeddings, anchor: int, k: int = 64, seed: int = 0,
                     labels=None, batch=None) -> np.ndarray:
    """Hybrid negatives for ``anchor``: half uniform, a quarter hard, a quarter from the batch.

    All picks are distinct, non-adjacent to the anchor, not the anchor itself, and, where
    both labels are known, carry a different label. Hard picks are the pool nodes of
    highest cosine similarity to the anchor. Batch picks come from ``batch`` (falling back
    to the pool when the batch runs dry).
    """
    n = g.n_nodes
    if labels is None:
        labels = g.labels
    eligible = np.ones(n, dtype=bool)
    eligible[anchor] = False
    eligible[g.neighbors(anchor)] = False
    if labels is not None and labels[anchor] >= 0:
        eligible &= ~(labels == labels[anchor])
    pool = np.flatnonzero(eligible)
    if k > len(pool):
        raise ValueError(f"negative pool exhausted for node {anchor}: need {k}, have {len(pool)}")
    rng = np.random.default_rng([seed, anchor])
    n_hard = k // 4
    n_batch = k // 4
    chosen: list = []
    if n_hard:
        emb = np.asarray(embeddings, dtype=np.float64)
        e = emb[pool]
        norms = np.linalg.norm(e, axis=1) * np.linalg.norm(emb[anchor])
        cos = np.where(norms > 0, e @ emb[anchor] / np.where(norms > 0, norms, 1.0), -np.inf)
        order = np.lexsort((pool, -cos))
        chosen += pool[order[:n_hard]].tolist()
    taken = np.zeros(n, dtype=bool)
    taken[chosen] = True
    if n_batch:
        src = pool if batch is None else np.intersect1d(np.asarray(batch), pool)
        src = src[~taken[src]]
        pick = rng.choice(src, size=min(n_batch, len(src)), replace=False) if len(src) else []
        chosen += list(np.sort(pick))
        taken[chosen] = True
    rest = pool[~taken[pool]]
    need = k - len(chosen)
    chosen += list(np.sort(rng.choice(rest, size=need, replace=False)))
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adamw_step(params: ParamBlock, lr: float = 1e-4, weight_decay: float = 1e-5,
               betas=(0.9, 0.999), step: Optional[int] = None, eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam update using the moments stored on ``params``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    t = params.step + 1 if step is None else int(step)
    g = params.grads
    params.m *= b1
    params.m += (1 - b1) * g
    params.v *= b2
    params.v += (1 - b2) * g * g
    m_hat = params.m / (1 - b1 ** t)
    v_hat = params.v / (1 - b2 ** t)
    params.values -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params.values)
    params.step = t


class AdamW:
    def __init__(self, lr: float = 1e-4, weight_decay: float = 1e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps

    def step(self, params: ParamBlock) -> None:
        adamw_step(params, self.lr, self.weight_decay, self.betas, eps=self.eps)


# ---------------------------------------------------------------------------
# Finite-difference audit
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def gradient_audit(f: Callable[[], float], x: np.ndarray, analytic, step: float = 1e-5,
                   floor: float = 1e-5) -> float:
    """Max coordinate-wise relative error between ``analytic`` and central differences."""
    num = numeric_gradient(f, x, step)
    err = relative_error(analytic, num, floor)
    return float(err.max()) if err.size else 0.0
