"""Clipped diffusion to a steady state, two-stream fusion and the three-way ensemble."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import as_operator
from .nn import softmax, softmax_backward


@dataclass(eq=False)
class DiffusionResult:
    Z_inf: np.ndarray
    steps: int
    final_delta: float
    clip_active: bool
    deltas: list = field(default_factory=list)
    _masks: Optional[list] = field(default=None, repr=False)


def robust_diffusion(Zr, op, gamma: float = 0.5, max_steps: int = 50, tol: float = 1e-6,
                     record: bool = False) -> DiffusionResult:
    """``Z <- clip_[0,1]((1-gamma) Zr + gamma op Z)`` from ``Z = Zr`` until the
    Frobenius step falls below ``tol`` (measured on clipped iterates)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    M = as_operator(op)
    Zr = np.asarray(Zr, dtype=np.float64)
    base = (1.0 - gamma) * Zr
    Z = Zr
    masks = [] if record else None
    deltas = []
    active = False
    steps = 0
    delta = float("inf")
    for _ in range(max_steps):
        pre = base + gamma * np.asarray(M @ Z)
        inside = (pre >= 0.0) & (pre <= 1.0)
        active |= not bool(inside.all())
        Z_new = np.clip(pre, 0.0, 1.0)
        if record:
            masks.append(inside)
        delta = float(np.linalg.norm(Z_new - Z))
        deltas.append(delta)
        Z = Z_new
        steps += 1
        if delta < tol:
            break
    return DiffusionResult(Z, steps, delta, active, deltas, masks)


def diffusion_backward(res: DiffusionResult, op, gamma: float, dZ) -> np.ndarray:
    """Gradient of a recorded diffusion w.r.t. its source ``Zr``."""
    if res._masks is None:
        raise RuntimeError("diffusion was not recorded")
    MT = as_operator(op).T
    G = np.asarray(dZ, dtype=np.float64)
    dZr = np.zeros_like(G)
    for inside in reversed(res._masks):
        Gp = G * inside
        dZr += (1.0 - gamma) * Gp
        G = gamma * np.asarray(MT @ Gp)
    return dZr + G


def _round_into_unit(out, *inputs):
    """Undo last-bit rounding that pushes a convex blend of [0,1] inputs outside [0,1]."""
    if all(P.size == 0 or (P.min() >= 0.0 and P.max() <= 1.0) for P in inputs):
        np.clip(out, 0.0, 1.0, out=out)
    return out


def fuse_predictions(Ybar_logits, Z_inf, rho: float = 0.5) -> np.ndarray:
    """``rho softmax(Ybar) + (1 - rho) Z_inf``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    Y = np.asarray(Ybar_logits, dtype=np.float64)
    Z = np.asarray(Z_inf, dtype=np.float64)
    if Y.shape != Z.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Z.shape}")
    if rho == 1.0:
        return softmax(Y)
    if rho == 0.0:
        return Z.copy()
    return _round_into_unit(rho * softmax(Y) + (1.0 - rho) * Z, Z)


def fuse_backward(Ybar_logits, rho: float, dY):
    """Gradients of the fusion w.r.t. the logits and ``Z_inf``."""
    p = softmax(Ybar_logits)
    return rho * softmax_backward(p, dY), (1.0 - rho) * np.asarray(dY)


def _check_kappas(kappas):
    k = np.asarray(kappas, dtype=np.float64)
    if k.shape != (3,):
        raise ValueError("ensemble needs three weights")
    if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-9:
        raise ValueError(f"ensemble weights must be non-negative and sum to 1, got {k.tolist()}")
    return k


def ensemble(predictions: Sequence, kappas=(1 / 3, 1 / 3, 1 / 3)) -> np.ndarray:
    """Convex combination of (fusion, diffusion-only, residual-only) predictions."""
    k = _check_kappas(kappas)
    if len(predictions) != 3:
        raise ValueError("ensemble needs three predictors")
    preds = [np.asarray(P, dtype=np.float64) for P in predictions]
    out = k[0] * preds[0]
    for w, P in zip(k[1:], preds[1:]):
        out = out + w * P
    return _round_into_unit(out, *preds)


def kappa_grid(step: float = 0.1):
    m = int(round(1.0 / step))
    for a, b in itertools.product(range(m + 1), repeat=2):
        if a + b <= m:
            yield np.array([a, b, m - a - b], dtype=np.float64) / m


def fit_kappas(predictions: Sequence, labels, mask, step: float = 0.1):
    """Grid search (``step``) of ensemble weights maximising accuracy on ``mask``.

    Ties keep the first grid point in lexicographic order.
    """
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("validation mask is empty")
    best, best_acc = None, -1.0
    for k in kappa_grid(step):
        pred = ensemble(predictions, k)[idx].argmax(axis=1)
        acc = float(np.mean(pred == labels[idx]))
        if acc > best_acc + 1e-12:
            best, best_acc = k, acc
    return best, best_acc
