"""Small sparse linear-algebra helpers shared by the graph and spectral modules."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def as_operator(matrix):
    """Return something supporting ``@`` and ``.T`` for dense, sparse or PropagationOperator input."""
    values = getattr(matrix, "values", matrix)
    if sp.issparse(values):
        return values.tocsr()
    return np.asarray(values, dtype=np.float64)


def largest_singular_value(matrix, iters: int = 200, seed: int = 0, tol: float = 1e-12):
    """Power iteration on the Gram operator ``M^T M``.

    Returns ``(sigma, iterations_used)``. The estimate ``||M x||`` with unit ``x`` is a
    lower bound of the true largest singular value that is non-decreasing in the
    iteration count. Iteration stops when the relative change drops below ``tol``.
    A start vector orthogonal to the dominant subspace gives a zero estimate; in that
    case the iteration restarts once from a fresh seed.
    """
    M = as_operator(matrix)
    n_cols = M.shape[1]
    if n_cols == 0 or iters < 1:
        return 0.0, 0
    if sp.issparse(M):
        if M.nnz == 0 or not np.any(M.data):
            return 0.0, 0
    elif not np.any(M):
        return 0.0, 0

    sigma, used = _run(M, iters, seed, tol)
    if sigma == 0.0:
        sigma, extra = _run(M, iters, seed + 7919, tol)
        used += extra
    return sigma, used


def _run(M, iters, seed, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for k in range(1, iters + 1):
        y = M @ x
        new_sigma = float(np.linalg.norm(y))
        if new_sigma == 0.0:
            return 0.0, k
        z = M.T @ y
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return new_sigma, k
        x = z / nz
        if sigma > 0.0 and abs(new_sigma - sigma) <= tol * new_sigma:
            # one more evaluation with the refined vector
            sigma = max(new_sigma, float(np.linalg.norm(M @ x)))
            return sigma, k
        sigma = new_sigma
    return max(sigma, float(np.linalg.norm(M @ x))), iters


def sym_normalize(A: sp.csr_array, with_self_loops: bool) -> sp.csr_array:
    """``D^{-1/2} (A [+ I]) D^{-1/2}`` with zero rows for zero-degree nodes."""
    A = sp.csr_array(A, dtype=np.float64)
    if with_self_loops:
        A = A + sp.eye_array(A.shape[0], dtype=np.float64, format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    D = sp.diags_array(inv_sqrt, format="csr")
    out = sp.csr_array(D @ A @ D)
    out.eliminate_zeros()
    out.sort_indices()
    return out
