"""Classification, robustness, causal, uniformity and cost metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .linalg import as_operator, largest_singular_value

logger = logging.getLogger(__name__)

ADEQUATE_MARGIN = 0.01


@dataclass
class MetricReport:
    accuracy: float = float("nan")
    roc_auc: float = float("nan")
    delta_auc_pct: float = 0.0
    r_abs: float = 0.0
    r_rel: float = 0.0
    retention_K: float = 0.0
    gamma_sens: float = float("nan")
    s_pair: float = float("nan")
    pn_lower: float = float("nan")
    ps_lower: float = float("nan")
    counterfactual_delta_auc: float = float("nan")
    c_epoch_estimate: float = float("nan")

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and np.isnan(v) else float(v))
                for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def append_csv(self, path, **extra) -> None:
        path = Path(path)
        row = {**extra, **self.to_dict()}
        new = not path.exists()
        with path.open("a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)


def accuracy(probs, labels, mask=None) -> float:
    labels = np.asarray(labels)
    idx = np.arange(len(labels)) if mask is None else np.flatnonzero(mask)
    return float(np.mean(np.asarray(probs)[idx].argmax(axis=1) == labels[idx]))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(probs, labels, mask=None) -> float:
    """Binary AUC on the positive-class column, or macro one-vs-rest for C > 2.

    Classes absent (or universal) in the evaluated rows are skipped.
    """
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if mask is not None:
        P, y = P[mask], y[mask]
    C = P.shape[1]
    if C == 2:
        return roc_auc(P[:, 1], y == 1)
    vals = []
    for k in range(C):
        pos = y == k
        if 0 < pos.sum() < len(y):
            vals.append(roc_auc(P[:, k], pos))
    if not vals:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(vals))


def delta_auc(auc_pert: float, auc_clean: float) -> float:
    """Relative AUC change in percent."""
    return 100.0 * (auc_pert - auc_clean) / auc_clean


def embedding_shift(H, H_pert, return_excluded: bool = False):
    """``(||H - H'||_F, mean_i ||h_i - h'_i|| / ||h_i||)``; zero rows of ``H`` are skipped."""
    H = np.asarray(H, dtype=np.float64)
    Hp = np.asarray(H_pert, dtype=np.float64)
    if H.shape != Hp.shape:
        raise ValueError("shape mismatch")
    r_abs = float(np.linalg.norm(H - Hp))
    norms = np.linalg.norm(H, axis=1)
    ok = norms > 0
    excluded = int((~ok).sum())
    if excluded:
        logger.info("embedding_shift: %d zero row(s) excluded", excluded)
    r_rel = float(np.mean(np.linalg.norm(H[ok] - Hp[ok], axis=1) / norms[ok])) if ok.any() else 0.0
    return (r_abs, r_rel, excluded) if return_excluded else (r_abs, r_rel)


def retention_K(acc_per_snapshot) -> float:
    """Mean over earlier snapshots of (final accuracy - accuracy on that snapshot)."""
    a = np.asarray(acc_per_snapshot, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least two snapshots")
    return float(np.mean(a[-1] - a[:-1]))


def pn_ps_bounds(counts) -> tuple[float, float]:
    """Lower bounds on PN and PS from a 2x2 table ``counts[t][y]``."""
    c = np.asarray(counts, dtype=np.float64)
    if c.shape != (2, 2):
        raise ValueError("counts must be 2x2 indexed [treatment][outcome]")
    n0, n1 = c[0].sum(), c[1].sum()
    if n0 == 0 or n1 == 0:
        raise ValueError("both treatment arms must be observed")
    y0_t0, y0_t1 = c[0, 0] / n0, c[1, 0] / n1
    y1_t1, y1_t0 = c[1, 1] / n1, c[0, 1] / n0
    pn = min(1.0, max(0.0, y0_t0 - y0_t1))
    ps = min(1.0, max(0.0, y1_t1 - y1_t0))
    return pn, ps


def outcome_table(full_auc: float, treated_aucs, control_aucs, margin: float = ADEQUATE_MARGIN):
    """2x2 table of adequate outcomes (AUC within ``margin`` of ``full_auc``) per arm."""
    t = np.zeros((2, 2))
    for arm, aucs in ((1, treated_aucs), (0, control_aucs)):
        for a in aucs:
            y = int(a >= full_auc - margin)
            t[arm, y] += 1
    return t


def counterfactual_delta(outputs_with, outputs_without, labels, mask=None) -> float:
    """AUC(do(T=0)) - AUC(full) in percentage points."""
    a_full = macro_auc(outputs_with, labels, mask)
    a_cf = macro_auc(outputs_without, labels, mask)
    return 100.0 * (a_cf - a_full)


def gamma_sens(encoder: Callable, op, op_pert, X, iters: int = 2000, seed: int = 0) -> float:
    """``||f(op') - f(op)||_2 / ||op' - op||_2`` with power-iteration spectral norms."""
    A = as_operator(op)
    B = as_operator(op_pert)
    delta = B - A
    dn, _ = largest_singular_value(delta, iters, seed, 1e-14)
    if dn <= 0:
        raise ValueError("operators coincide; sensitivity undefined")
    diff = np.asarray(encoder(op_pert, X)) - np.asarray(encoder(op, X))
    num, _ = largest_singular_value(diff, iters, seed, 1e-14)
    return num / dn


def s_pair(Z) -> float:
    """Mean cosine similarity over all ordered row pairs, self pairs included."""
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero row; cosine undefined")
    U = Z / norms[:, None]
    s = U.sum(axis=0)
    return float(s @ s) / Z.shape[0] ** 2


def complexity_estimate(N, E, d, T, K_critic, k_neg, H, d_h, d_g=None):
    """Per-epoch operation counts ``(full, approx, full/approx)``.

    ``d_g`` is accepted for interface symmetry; the cost expression has no generator-width term.
    """
    approx = float((T + K_critic) * (N + E) * d)
    full = approx + float(N * k_neg * d + E * H * d_h + N * H * d_h ** 2)
    return full, approx, (full / approx if approx else float("inf"))


def report_fields() -> list:
    return [f.name for f in fields(MetricReport)]
