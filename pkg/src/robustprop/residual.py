"""Confidence-weighted residual propagation, reintegration and a dense fixed-point oracle."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .exceptions import SingularSystemError
from .linalg import as_operator
from .nn import ParamBlock, sigmoid
from .spectral import contraction_factor

DEFAULT_T = 20
DEFAULT_TOL = 1e-8


class NonContractionWarning(RuntimeWarning):
    pass


@dataclass(eq=False)
class ConfidenceVector:
    c: np.ndarray
    capped: bool = False

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if np.any(self.c <= 0.0) or np.any(self.c >= 1.0):
            raise ValueError("confidences must lie strictly inside (0, 1)")

    def __array__(self, dtype=None, copy=None):
        return self.c if dtype is None else self.c.astype(dtype)


@dataclass(eq=False)
class ResidualState:
    """Residual iterate ``R`` after ``t`` steps, with contraction factor and step-norm trace."""

    R: np.ndarray
    R0: np.ndarray
    t: int = 0
    kappa: float = float("nan")
    trace: list = field(default_factory=list)
    certified: bool = True
    history: Optional[list] = field(default=None, repr=False)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "step_norm"])
            for t, v in enumerate(self.trace, start=1):
                w.writerow([t, repr(float(v))])


# ---------------------------------------------------------------------------
# Confidence
# ---------------------------------------------------------------------------

def confidence_params(d: int, seed: int = 0, extra: int = 0) -> ParamBlock:
    """``w_c`` of length ``2d + extra`` stored as a column, and the scalar ``b_c``."""
    block = ParamBlock.create([(2 * d + extra, 1), (1,)], seed)
    return block


def neighbor_mean(g, X) -> np.ndarray:
    A = g.adjacency()
    deg = np.asarray(A.sum(axis=1)).ravel()
    agg = np.asarray(A @ X)
    agg[deg > 0] /= deg[deg > 0, None]
    return agg


def confidence_inputs(g, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.concatenate([X, neighbor_mean(g, X)], axis=1)


def estimate_confidence(g, X, params: ParamBlock) -> ConfidenceVector:
    """``c_i = sigmoid(w_c . [x_i || mean_j x_j] + b_c)``; isolated nodes use a zero mean.

    Saturated values are nudged inside (0, 1) so the vector stays valid in floating point.
    """
    z = confidence_inputs(g, X) @ params.view(0)[:, 0] + params.view(1)[0]
    return ConfidenceVector(_open_unit(sigmoid(z)))


def _open_unit(c):
    tiny = np.finfo(np.float64).eps
    return np.clip(c, tiny, 1.0 - tiny)


def confidence_backward(inputs, c, params: ParamBlock, dc) -> None:
    """Accumulate gradients of the sigmoid-linear confidence map into ``params``."""
    dz = np.asarray(dc) * c * (1.0 - c)
    params.grad(0)[:, 0] += inputs.T @ dz
    params.grad(1)[0] += dz.sum()


# ---------------------------------------------------------------------------
# Residual propagation
# ---------------------------------------------------------------------------

def init_residual(Z0, Y_obs) -> ResidualState:
    Z0 = np.asarray(Z0, dtype=np.float64)
    Y = np.asarray(Y_obs, dtype=np.float64)
    if Z0.shape != Y.shape:
        raise ValueError(f"shape mismatch: {Z0.shape} vs {Y.shape}")
    R0 = Z0 - Y
    return ResidualState(R0.copy(), R0, 0)


def propagate_residual(state: ResidualState, op, c, T: int = DEFAULT_T, tol: float = DEFAULT_TOL,
                       record: bool = False) -> ResidualState:
    """``R^(t+1) = (1-c) R^(0) + c (op R^(t))`` row-wise, for ``T`` steps or until the
    Frobenius step norm drops below ``tol``.

    With ``record`` the pre-step iterates and their propagated images are kept for
    :func:`propagate_residual_backward`.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    c = np.asarray(c, dtype=np.float64)
    kappa = contraction_factor(op, c) if hasattr(op, "norm_estimate") else float("nan")
    certified = bool(kappa < 1.0)
    if not certified:
        warnings.warn(f"contraction factor {kappa:.4g} >= 1; convergence not certified",
                      NonContractionWarning, stacklevel=2)
    M = as_operator(op)
    R0 = state.R0
    base = (1.0 - c)[:, None] * R0
    R = state.R
    trace = list(state.trace)
    history = [] if record else None
    t = state.t
    for _ in range(T):
        AR = np.asarray(M @ R)
        R_new = base + c[:, None] * AR
        if record:
            history.append((R, AR))
        step = float(np.linalg.norm(R_new - R))
        R = R_new
        t += 1
        trace.append(step)
        if step < tol:
            break
    return ResidualState(R, R0, t, kappa, trace, certified, history)


def propagate_residual_backward(state: ResidualState, op, c, dR):
    """Reverse pass through a recorded propagation. Returns ``(dc, dR0)``."""
    if state.history is None:
        raise RuntimeError("propagation was not recorded")
    M = as_operator(op)
    c = np.asarray(c, dtype=np.float64)
    R0 = state.R0
    G = np.asarray(dR, dtype=np.float64)
    dc = np.zeros_like(c)
    dR0 = np.zeros_like(R0)
    MT = M.T
    for R_prev, AR in reversed(state.history):
        dc += np.sum(G * (AR - R0), axis=1)
        dR0 += (1.0 - c)[:, None] * G
        G = np.asarray(MT @ (c[:, None] * G))
    dR0 += G
    return dc, dR0


def labeled_scale(R0, labeled) -> float:
    idx = _labeled_index(labeled, R0.shape[0])
    if idx.size == 0:
        raise ValueError("labeled set is empty")
    return float(np.mean(np.abs(R0[idx]).sum(axis=1)))


def _labeled_index(labeled, n):
    lab = np.asarray(labeled)
    if lab.dtype == bool:
        return np.flatnonzero(lab)
    return np.unique(lab.astype(np.int64))


def reintegrate_residual(Z0, state: ResidualState, labeled, eps: float = 1e-8,
                         sign: float = 1.0) -> np.ndarray:
    """``Z0 + sign * s_norm * R^(T)_i / max(eps, ||R^(T)_i||_1)``.

    ``s_norm`` is the mean l1 norm of ``R^(0)`` over the labeled rows.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    s = labeled_scale(state.R0, labeled)
    R = state.R
    denom = np.maximum(eps, np.abs(R).sum(axis=1))
    return np.asarray(Z0, dtype=np.float64) + sign * s * R / denom[:, None]


def reintegrate_backward(state: ResidualState, labeled, dZr, eps: float = 1e-8,
                         sign: float = 1.0) -> np.ndarray:
    """Gradient of the reintegrated matrix w.r.t. ``R^(T)`` (``s_norm`` held fixed)."""
    s = labeled_scale(state.R0, labeled)
    R = state.R
    l1 = np.abs(R).sum(axis=1)
    G = np.asarray(dZr, dtype=np.float64) * sign * s
    out = np.zeros_like(R)
    big = l1 > eps
    out[~big] = G[~big] / eps
    nb = l1[big][:, None]
    out[big] = G[big] / nb - np.sum(G[big] * R[big], axis=1, keepdims=True) * np.sign(R[big]) / nb ** 2
    return out


def dense_fixed_point_oracle(op, c, R0) -> np.ndarray:
    """Solve ``(I - diag(c) op) R* = (I - diag(c)) R0`` densely.

    Raises :class:`SingularSystemError` when ``max(c) * ||op||_2 >= 1`` (no contraction
    guarantee) or the system is numerically singular.
    """
    M = as_operator(op)
    M = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if n > 256:
        raise ValueError("dense oracle limited to 256 nodes")
    c = np.asarray(c, dtype=np.float64)
    kappa = float(np.max(c)) * float(np.linalg.norm(M, 2)) if n else 0.0
    if kappa >= 1.0:
        raise SingularSystemError(f"non-contractive system: kappa = {kappa:.6g} >= 1")
    lhs = np.eye(n) - c[:, None] * M
    rhs = (1.0 - c)[:, None] * np.asarray(R0, dtype=np.float64)
    return np.linalg.solve(lhs, rhs)
