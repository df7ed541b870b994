"""Spectral-norm estimation, operator clipping and the confidence ceiling."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .graph import NORM_TOL, PropagationOperator, Provenance
from .linalg import as_operator, largest_singular_value

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-4
DEFAULT_CEILING = 0.98
# Iteration budget used when a norm is re-estimated for a clip report.
REPORT_ITERS = 2000


@dataclass(frozen=True)
class ClipReport:
    nu_before: float
    nu_after: float
    scale: float
    epsilon: float
    kappa_before: float
    kappa_after: float
    converged_power_iters: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


def power_iteration(op, iters: int = 10, seed: int = 0, tol: float = 0.0) -> float:
    """Estimate the largest singular value of ``op`` (operator, sparse or dense matrix).

    ``tol=0`` runs exactly ``iters`` Gram iterations unless the estimate stops moving.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sigma, _ = largest_singular_value(op, iters, seed, tol)
    return sigma


def clip_scale(nu: float, epsilon: float = DEFAULT_EPSILON) -> float:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return min(1.0, 1.0 / (nu + epsilon))


def spectral_clip(op: PropagationOperator, epsilon: float = DEFAULT_EPSILON,
                  c=None, ceiling: float | None = None, norm_iters: int = REPORT_ITERS,
                  seed: int = 0) -> tuple[PropagationOperator, ClipReport]:
    """Rescale ``op`` by ``min(1, 1/(nu + epsilon))`` using its cached norm estimate.

    When ``c`` is given the report also carries the contraction factor before and after
    (the latter with the ceiling applied, if one is given).
    """
    nu = float(op.norm_estimate)
    scale = clip_scale(nu, epsilon)
    if scale < 1.0:
        values = op.values * scale
        values.sort_indices()
        nu_after = nu * scale
    else:
        values = op.values
        nu_after = nu
    out = PropagationOperator(values, nu_after, Provenance.CLIPPED, op.self_loops)
    if c is not None:
        c = np.asarray(c, dtype=np.float64)
        kb = float(np.max(c)) * nu
        c_after = cap_confidence(c, ceiling) if ceiling is not None else c
        ka = float(np.max(c_after)) * nu_after
    else:
        kb, ka = nu, nu_after
    # cached estimates come from converged runs; the iteration count is what the
    # estimate would need from scratch
    _, used = largest_singular_value(op, norm_iters, seed, NORM_TOL)
    report = ClipReport(nu, nu_after, scale, float(epsilon), kb, ka, int(used))
    return out, report


def cap_confidence(c, ceiling: float = DEFAULT_CEILING) -> np.ndarray:
    """Element-wise ``min(c_i, ceiling)``; every ``c_i`` must lie strictly inside (0, 1)."""
    if not 0.0 < ceiling < 1.0:
        raise ValueError("ceiling must lie in (0, 1)")
    c = np.asarray(c, dtype=np.float64)
    bad = np.flatnonzero(~((c > 0.0) & (c < 1.0)))
    if bad.size:
        raise ValueError(f"confidence outside (0,1) at index {int(bad[0])}: {c[bad[0]]!r}")
    return np.minimum(c, ceiling)


def contraction_factor(op, c) -> float:
    """``max(c) * ||op||_2`` with the operator's cached norm estimate."""
    c = np.asarray(c, dtype=np.float64)
    if c.size and (np.any(c < 0.0) or np.any(c > 1.0)):
        raise ValueError("confidences must lie in [0, 1]")
    nu = op.norm_estimate if isinstance(op, PropagationOperator) else float(op)
    return float(np.max(c)) * float(nu) if c.size else 0.0


def clip_distortion_norm(nu: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """Spectral norm of ``op - clip(op)`` for an operator with norm ``nu``: ``(1 - 1/(nu+eps)) nu``.

    Only meaningful on the clipping branch (``nu + eps > 1``); otherwise the clip is a
    no-op and the distortion is zero.
    """
    if nu <= 0 or epsilon < 0:
        raise ValueError("need nu > 0 and epsilon >= 0")
    if nu + epsilon <= 1.0:
        return 0.0
    return (1.0 - 1.0 / (nu + epsilon)) * nu


def weighted_operator_norm(op, c, iters: int = REPORT_ITERS, seed: int = 0) -> float:
    """Power-iteration norm of ``diag(c) @ op``."""
    M = as_operator(op)
    c = np.asarray(c, dtype=np.float64)
    if hasattr(M, "multiply"):
        W = M.multiply(c[:, None]).tocsr()
    else:
        W = c[:, None] * M
    sigma, _ = largest_singular_value(W, iters, seed, NORM_TOL)
    return sigma
