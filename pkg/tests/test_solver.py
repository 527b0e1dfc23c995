import time

import numpy as np
import pytest

from mnarmc.errors import PanelError
from mnarmc.solver import (
    SolverOptions,
    estimate_rank,
    estimate_sigma_initial,
    fix_signs,
    nuclear_objective,
    select_lambda,
    soft_threshold_svd,
    solve_nuclear,
    svd,
)

from conftest import low_rank


def nuc(a):
    return np.linalg.svd(a, compute_uv=False).sum()


def test_soft_threshold_examples():
    np.testing.assert_allclose(soft_threshold_svd(np.diag([3.0, 1.0]), 2.0), np.diag([1.0, 0.0]), atol=1e-14)
    b = np.random.default_rng(0).standard_normal((6, 4))
    np.testing.assert_allclose(soft_threshold_svd(b, 0.0), b, atol=1e-12)
    s1 = np.linalg.svd(b, compute_uv=False)[0]
    assert np.all(soft_threshold_svd(b, s1 * (1 + 1e-12)) == 0)
    np.testing.assert_allclose(soft_threshold_svd(b, s1), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        soft_threshold_svd(np.array([[np.nan, 1.0], [1.0, 1.0]]), 1.0)


def test_prox_optimality_against_random_candidates(rng):
    b = rng.standard_normal((8, 6))
    lam = 0.7
    p = soft_threshold_svd(b, lam)
    f = lambda a: 0.5 * np.sum((a - b) ** 2) + lam * nuc(a)
    fp = f(p)
    for _ in range(100):
        c = p + rng.standard_normal(b.shape) * rng.choice([1e-3, 1e-1, 1.0])
        assert fp <= f(c) + 1e-12


def test_partial_svd_path_matches_dense(rng):
    # large enough to use the iterative backend
    m, _, _ = low_rank(420, 410, 3, seed=5, scale=10.0)
    b = m + rng.standard_normal(m.shape)
    lam = 3.0 * np.sqrt(420)
    dense_u, dense_s, dense_vt = np.linalg.svd(b, full_matrices=False)
    shrunk = np.maximum(dense_s - lam, 0)
    expect = (dense_u * shrunk) @ dense_vt
    np.testing.assert_allclose(soft_threshold_svd(b, lam), expect, atol=1e-8 * np.abs(expect).max())


def test_full_mask_solve_equals_prox(rng):
    for _ in range(5):
        y = rng.standard_normal((12, 9))
        lam = rng.uniform(0.1, 2.0)
        a, d = solve_nuclear(y, np.ones_like(y, bool), lam)
        ref = soft_threshold_svd(y, lam)
        assert np.linalg.norm(a - ref) <= 1e-6 * max(np.linalg.norm(ref), 1e-300) + 1e-12
        assert d.converged


def test_lam_zero_full_mask_returns_y(rng):
    y = rng.standard_normal((7, 5))
    a, _ = solve_nuclear(y, np.ones_like(y, bool), 0.0)
    np.testing.assert_allclose(a, y, atol=1e-12)


def test_rank_one_single_missing_entry():
    u = np.linspace(1, 2, 20)
    v = np.linspace(-1, 1.5, 20) + 0.3
    y = np.outer(u, v)
    mask = np.ones_like(y, bool)
    mask[4, 7] = False
    a, _ = solve_nuclear(np.where(mask, y, np.nan), mask, 1e-6 * np.linalg.norm(y),
                         SolverOptions(max_iters=5000))
    # exact completion: y_47 = y_4j * y_i7 / y_ij for any observed pair
    oracle = y[4, 0] * y[0, 7] / y[0, 0]
    assert abs(a[4, 7] - oracle) <= 1e-3


def test_monotone_descent_without_acceleration(rng):
    m, _, _ = low_rank(25, 20, 2, seed=3)
    y = m + 0.3 * rng.standard_normal(m.shape)
    mask = rng.random(m.shape) > 0.3
    mask[:, 0] = mask[0, :] = True
    lam = 1.0
    _, d = solve_nuclear(y, mask, lam, SolverOptions(acceleration=False, max_iters=200), record_path=True)
    path = np.array(d.objective_path)
    assert np.all(np.diff(path) <= 1e-10 * np.abs(path[:-1]))
    _, d2 = solve_nuclear(y, mask, lam, record_path=True)
    assert d2.objective_path[-1] <= d2.objective_path[0]
    assert d2.final_objective >= 0


def test_final_objective_matches_direct_evaluation(rng):
    y = rng.standard_normal((10, 8))
    mask = rng.random(y.shape) > 0.2
    mask[:, 0] = mask[0, :] = True
    a, d = solve_nuclear(y, mask, 0.5)
    assert d.final_objective == pytest.approx(nuclear_objective(a, y, mask, 0.5), rel=1e-10)


def test_scale_equivariance(rng):
    m, _, _ = low_rank(15, 12, 2, seed=4)
    y = m + 0.1 * rng.standard_normal(m.shape)
    mask = np.ones_like(y, bool)
    mask[10:, 9:] = False
    opts = SolverOptions(max_iters=3000, rel_tol=1e-12)
    a1, _ = solve_nuclear(y, mask, 0.4, opts)
    a2, _ = solve_nuclear(3.0 * y, mask, 1.2, opts)
    assert np.linalg.norm(a2 - 3.0 * a1) <= 1e-8 * np.linalg.norm(a2)


def test_nonconvergence_is_flagged_not_raised():
    m, _, _ = low_rank(20, 20, 2, seed=9)
    y = m + np.random.default_rng(0).standard_normal(m.shape)
    mask = np.ones_like(m, bool)
    mask[15:, 15:] = False
    _, d = solve_nuclear(y, mask, 1.0, SolverOptions(max_iters=2))
    assert d.iterations == 2 and not d.converged


def test_invalid_mask_rejected():
    y = np.ones((3, 3))
    mask = np.ones((3, 3), bool)
    mask[1] = False
    with pytest.raises(PanelError):
        solve_nuclear(y, mask, 1.0)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)
    with pytest.raises(ValueError):
        SolverOptions(rel_tol=1.0)


def test_select_lambda_examples():
    assert select_lambda(1.0, 100, 100, 2.0) == 20.0
    assert select_lambda(0.0, 7, 9, 3.0) == 0.0
    assert select_lambda(2.0, 64, 100, 1.5) == 30.0
    with pytest.raises(ValueError):
        select_lambda(-1.0, 2, 2)


def test_sigma_initial(rng):
    m, _, _ = low_rank(30, 20, 2)
    assert estimate_sigma_initial(m, 2) < 1e-12
    s, _, _ = low_rank(200, 200, 1, seed=2, scale=50.0)
    e = rng.standard_normal((200, 200))
    target = np.linalg.norm(e) / 200
    assert abs(estimate_sigma_initial(s + e, 1) - target) <= 0.1 * target
    g = rng.standard_normal((6, 5))
    smin = np.linalg.svd(g, compute_uv=False)[-1]
    assert estimate_sigma_initial(g, 4) == pytest.approx(smin / np.sqrt(30), rel=1e-10)
    with pytest.raises(ValueError):
        estimate_sigma_initial(g, 5)


def _with_singular_values(s, n=12, m=10, seed=0):
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((n, len(s))))
    v, _ = np.linalg.qr(rng.standard_normal((m, len(s))))
    return (u * np.asarray(s, float)) @ v.T


def test_estimate_rank_examples():
    assert estimate_rank(_with_singular_values([10, 9, 0.1, 0.09, 0.08]), 4) == 2
    m, _, _ = low_rank(20, 15, 1)
    jitter = 1e-10 * np.random.default_rng(1).standard_normal(m.shape)
    assert estimate_rank(m + jitter, 5) == 1
    assert estimate_rank(_with_singular_values([5, 0.5, 0.05]), 2) == 1
    with pytest.raises(ValueError):
        estimate_rank(np.eye(3), 3)


def test_sign_convention(rng):
    b = rng.standard_normal((6, 4))
    u, s, vt = svd(b)
    idx = np.argmax(np.abs(u), axis=0)
    assert np.all(u[idx, np.arange(4)] >= 0)
    np.testing.assert_allclose((u * s) @ vt, b, atol=1e-12)
    u2, vt2 = fix_signs(-u, -vt)
    np.testing.assert_allclose(u2, u)
