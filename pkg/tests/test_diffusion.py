import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from robustprop.diffusion import (diffusion_backward, ensemble, fit_kappas, fuse_backward,
                                  fuse_predictions, kappa_grid, robust_diffusion)
from robustprop.graph import generate_sbm, normalize_adjacency
from robustprop.nn import gradient_audit, softmax

HALF = np.array([[0.5, 0.5], [0.5, 0.5]])


def random_walk(seed, n=20):
    g = generate_sbm(n, 2, 0.3, 0.1, 1, 1.0, seed)
    A = g.adjacency().toarray() + np.eye(n)
    return A / A.sum(1, keepdims=True)


def test_gamma_zero_is_one_clip_step():
    Zr = np.array([[1.2, -0.1], [0.4, 0.6]])
    res = robust_diffusion(Zr, HALF, gamma=0.0)
    np.testing.assert_array_equal(res.Z_inf, np.clip(Zr, 0, 1))
    assert res.clip_active
    res = robust_diffusion(np.array([[0.3, 0.7]]), np.eye(1), gamma=0.0)
    assert res.steps == 1


def test_two_node_example():
    res = robust_diffusion(np.eye(2), HALF, gamma=0.5, max_steps=200, tol=1e-14)
    np.testing.assert_allclose(res.Z_inf, [[0.75, 0.25], [0.25, 0.75]], atol=1e-12)
    assert not res.clip_active


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_dense_solve_when_clip_inactive(seed):
    rng = np.random.default_rng(seed)
    P = random_walk(seed)
    gamma = min(0.9, 0.9 / np.linalg.norm(P, 2))
    Zr = softmax(rng.standard_normal((20, 3)))
    res = robust_diffusion(Zr, sp.csr_array(P), gamma, max_steps=5000, tol=1e-13)
    assert not res.clip_active
    dense = np.linalg.solve(np.eye(20) - gamma * P, (1 - gamma) * Zr)
    np.testing.assert_allclose(res.Z_inf, dense, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_step_deltas_non_increasing(seed, gamma):
    rng = np.random.default_rng(seed)
    op = normalize_adjacency(generate_sbm(25, 2, 0.3, 0.1, 1, 1.0, seed))
    assert gamma * op.norm_estimate < 1
    Zr = rng.uniform(-0.5, 1.5, (25, 3))
    res = robust_diffusion(Zr, op, gamma, max_steps=100, tol=0.0)
    d = np.asarray(res.deltas)
    assert np.all(d[1:] <= d[:-1] + 1e-9)
    assert np.all((res.Z_inf >= 0) & (res.Z_inf <= 1))


def test_invalid_gamma():
    with pytest.raises(ValueError):
        robust_diffusion(np.eye(2), HALF, gamma=1.5)


def test_diffusion_backward_oracle():
    rng = np.random.default_rng(0)
    op = normalize_adjacency(generate_sbm(10, 2, 0.4, 0.1, 1, 1.0, 0))
    Zr = rng.uniform(-0.3, 1.3, (10, 3))
    up = rng.standard_normal((10, 3))
    f = lambda: float(np.sum(robust_diffusion(Zr, op, 0.5, 8, 0.0).Z_inf * up))
    res = robust_diffusion(Zr, op, 0.5, 8, 0.0, record=True)
    assert gradient_audit(f, Zr, diffusion_backward(res, op, 0.5, up)) < 1e-4


def test_fusion_extremes_and_convexity():
    rng = np.random.default_rng(1)
    Y = rng.standard_normal((4, 3))
    Z = softmax(rng.standard_normal((4, 3)))
    assert np.array_equal(fuse_predictions(Y, Z, 1.0), softmax(Y))
    assert np.array_equal(fuse_predictions(Y, Z, 0.0), Z)
    F = fuse_predictions(Y, Z, 0.5)
    np.testing.assert_allclose(F.sum(1), 1.0, atol=1e-12)
    assert np.all((F >= 0) & (F <= 1))
    with pytest.raises(ValueError):
        fuse_predictions(Y, Z, -0.1)


def test_fusion_backward_oracle():
    rng = np.random.default_rng(2)
    Y, Z, up = (rng.standard_normal((4, 3)) for _ in range(3))
    dY, dZ = fuse_backward(Y, 0.3, up)
    f = lambda: float(np.sum(fuse_predictions(Y, Z, 0.3) * up))
    assert gradient_audit(f, Y, dY) < 1e-4
    assert gradient_audit(f, Z, dZ) < 1e-4


def test_ensemble_examples():
    rng = np.random.default_rng(3)
    P = [rng.random((4, 3)) for _ in range(3)]
    np.testing.assert_array_equal(ensemble(P, (1, 0, 0)), P[0])
    np.testing.assert_allclose(ensemble([P[0]] * 3), P[0], atol=1e-15)
    for bad in ((0.5, 0.5, 0.5), (-0.1, 0.6, 0.5), (1.0, 0.0)):
        with pytest.raises(ValueError):
            ensemble(P, bad)


def test_ensemble_argmax_invariant_to_shared_row_scaling():
    rng = np.random.default_rng(4)
    for _ in range(200):
        P = [rng.random((4, 3)) for _ in range(3)]
        k = rng.dirichlet(np.ones(3))
        row, c = int(rng.integers(4)), float(rng.uniform(0.01, 100))
        Q = [p.copy() for p in P]
        for q in Q:
            q[row] *= c
        assert np.array_equal(ensemble(P, k).argmax(1), ensemble(Q, k).argmax(1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ensemble_stays_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    P = [rng.random((5, 2)) for _ in range(3)]
    out = ensemble(P, rng.dirichlet(np.ones(3)))
    assert np.all((out >= 0) & (out <= 1))


def test_kappa_grid_and_fit():
    grid = list(kappa_grid(0.1))
    assert len(grid) == 66
    assert all(abs(k.sum() - 1) < 1e-12 and np.all(k >= 0) for k in grid)
    rng = np.random.default_rng(5)
    y = rng.integers(0, 3, 30)
    good = np.eye(3)[y] + 0.1 * rng.random((30, 3))
    P = [rng.random((30, 3)), good, rng.random((30, 3))]
    mask = np.ones(30, bool)
    k, acc = fit_kappas(P, y, mask)
    assert acc == 1.0
    brute = max(np.mean(ensemble(P, g).argmax(1) == y) for g in grid)
    assert acc == brute


def test_determinism():
    op = normalize_adjacency(generate_sbm(30, 2, 0.3, 0.1, 1, 1.0, 2))
    Zr = np.random.default_rng(0).random((30, 2))
    assert np.array_equal(robust_diffusion(Zr, op).Z_inf, robust_diffusion(Zr, op).Z_inf)
