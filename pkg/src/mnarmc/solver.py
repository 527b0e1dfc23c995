"""Nuclear-norm penalized matrix completion.

Solves ``min_A 0.5 * ||mask * (Y - A)||_F^2 + lam * ||A||_*`` by proximal
gradient with unit step (the masked quadratic is 1-Lipschitz), optionally
with FISTA momentum and an objective-based restart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import svds

from .errors import PanelError

# Below this size a dense SVD is cheaper than ARPACK.
_PARTIAL_SVD_MIN_DIM = 400


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 500
    rel_tol: float = 1e-7
    acceleration: bool = True
    lambda_constant: float = 2.0

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if not self.lambda_constant > 0:
            raise ValueError("lambda_constant must be positive")


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    final_objective: float
    rel_change: float
    converged: bool
    objective_path: tuple = field(default=(), repr=False)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "final_objective": self.final_objective,
            "rel_change": self.rel_change,
            "converged": self.converged,
        }


def fix_signs(u, vt):
    """Make each left singular vector's largest-magnitude entry nonnegative."""
    if u.shape[1] == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(b, k=None):
    """Thin SVD with deterministic signs, optionally truncated to ``k``."""
    u, s, vt = np.linalg.svd(b, full_matrices=False)
    if k is not None:
        u, s, vt = u[:, :k], s[:k], vt[:k]
    u, vt = fix_signs(u, vt)
    return u, s, vt


def _top_svd(b, lam, k_hint):
    """Singular triplets of ``b`` covering every singular value above ``lam``."""
    n = min(b.shape)
    if n < _PARTIAL_SVD_MIN_DIM or lam <= 0:
        return np.linalg.svd(b, full_matrices=False)
    k = max(int(k_hint), 4)
    while 2 * k < n:
        u, s, vt = svds(b, k=k, random_state=0)
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]
        if s[-1] <= lam:
            return u, s, vt
        k *= 2
    return np.linalg.svd(b, full_matrices=False)


def _svt(b, lam, k_hint=0):
    u, s, vt = _top_svd(b, lam, k_hint)
    shrunk = np.maximum(s - lam, 0.0)
    keep = int(np.count_nonzero(shrunk))
    return (u[:, :keep] * shrunk[:keep]) @ vt[:keep], shrunk[:keep]


def soft_threshold_svd(b, lam):
    """Proximal operator of ``lam * ||.||_*``: shrink singular values by ``lam``.

    Returns the minimizer of ``0.5 * ||A - B||_F^2 + lam * ||A||_*``.
    """
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("soft_threshold_svd needs a finite matrix")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return _svt(b, float(lam))[0]


def nuclear_objective(a, y, mask, lam):
    resid = np.where(mask, a - y, 0.0)
    return 0.5 * float(np.sum(resid * resid)) + lam * float(np.linalg.svd(a, compute_uv=False).sum())


def solve_nuclear(values, mask, lam, opts=None, *, record_path=False):
    """Approximately minimize the penalized masked least-squares objective.

    Parameters
    ----------
    values : ndarray, shape (n, m)
        Data; entries outside ``mask`` are ignored (NaN allowed there).
    mask : ndarray of bool, shape (n, m)
        Observed entries; every row and column needs at least one.
    lam : float
        Penalty level (nonnegative).
    opts : SolverOptions, optional
    record_path : bool
        Keep the objective at every iterate in the diagnostics.

    Returns
    -------
    A : ndarray, shape (n, m)
    diagnostics : SolveDiagnostics
        ``converged`` is False when ``max_iters`` was reached first; this is
        not an error.
    """
    opts = opts or SolverOptions()
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, np.asarray(values, dtype=np.float64), 0.0)
    if mask.shape != y.shape:
        raise PanelError("mask and values shapes differ")
    if not (mask.any(axis=1).all() and mask.any(axis=0).all()):
        raise PanelError("every row and column needs at least one observed entry")
    if not np.all(np.isfinite(y)):
        raise PanelError("observed values must be finite")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    lam = float(lam)

    def objective(a, sv):
        r = np.where(mask, a - y, 0.0)
        return 0.5 * float(np.sum(r * r)) + lam * float(sv.sum())

    a = y.copy()
    f = objective(a, np.linalg.svd(a, compute_uv=False))
    path = [f] if record_path else None
    x = a
    t = 1.0
    k_hint = 0
    rel = math.inf
    it = 0
    converged = False
    for it in range(1, int(opts.max_iters) + 1):
        a_new, sv = _svt(np.where(mask, y, x), lam, k_hint)
        f_new = objective(a_new, sv)
        if opts.acceleration and f_new > f:
            # restart: plain step from the last accepted iterate
            t = 1.0
            a_new, sv = _svt(np.where(mask, y, a), lam, k_hint)
            f_new = objective(a_new, sv)
        k_hint = len(sv) + 2
        norm = float(np.linalg.norm(a))
        diff = float(np.linalg.norm(a_new - a))
        rel = diff / norm if norm > 0 else (0.0 if diff == 0 else math.inf)
        if opts.acceleration:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            x = a_new + ((t - 1.0) / t_new) * (a_new - a)
            t = t_new
        else:
            x = a_new
        a, f = a_new, f_new
        if record_path:
            path.append(f)
        if rel <= opts.rel_tol:
            converged = True
            break
    return a, SolveDiagnostics(it, f, rel, converged, tuple(path) if record_path else ())


def select_lambda(sigma, n, m, c_lambda=2.0):
    """Penalty level ``c_lambda * sigma * sqrt(max(n, m))``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if n < 1 or m < 1:
        raise ValueError("dimensions must be positive")
    return float(c_lambda) * float(sigma) * math.sqrt(max(n, m))


def estimate_sigma_initial(block, r):
    """Pilot noise scale from the rank-``r`` residual of a fully observed block."""
    block = np.asarray(block, dtype=np.float64)
    if not 0 <= r < min(block.shape):
        raise ValueError(f"rank {r} must be below min(block.shape) = {min(block.shape)}")
    s = np.linalg.svd(block, compute_uv=False)
    return math.sqrt(float(np.sum(s[r:] ** 2)) / block.size)


def estimate_rank(block, r_max):
    """Eigenvalue-ratio rank: the ``k <= r_max`` maximizing ``s_k / s_{k+1}``.

    Near-ties (relative 1e-9) go to the smaller ``k``.
    """
    block = np.asarray(block, dtype=np.float64)
    if not 1 <= r_max < min(block.shape):
        raise ValueError(f"r_max must lie in [1, {min(block.shape) - 1}]")
    s = np.linalg.svd(block, compute_uv=False)[: r_max + 1]
    num, den = s[:-1], s[1:]
    safe = np.where(den > 0, den, 1.0)
    ratios = np.where(den > 0, num / safe, np.where(num > 0, np.inf, 1.0))
    best = ratios.max()
    if np.isinf(best):
        return int(np.flatnonzero(np.isinf(ratios))[0]) + 1
    return int(np.flatnonzero(ratios >= best * (1 - 1e-9))[0]) + 1
