"""Fit submatrices and complete whole panels.

Each submatrix is solved with its own penalty, spliced with the observed
data and projected to rank ``r``; the de-shrunken factors are kept for the
variance formulas in :mod:`mnarmc.inference`.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .debias import FactorPair, debias_project, deshrink_factors, rank_r_project
from .panel import FULLY_OBSERVED, STAGGERED, ObservedPanel, classify_pattern
from .solver import (
    SolveDiagnostics,
    SolverOptions,
    estimate_rank,
    estimate_sigma_initial,
    select_lambda,
    solve_nuclear,
)
from .subgroup import Reassembler, completion_plan, untreated_before

# Relative floor on the penalty so that exactly low-rank data still gets a
# strictly positive lambda (lambda = 0 never fills missing entries).
LAMBDA_FLOOR = 1e-6
DEFAULT_R_MAX = 8


@dataclass(frozen=True, eq=False)
class SubFit:
    """Penalized fit, debiased fit and factors for one submatrix."""

    sub: object
    m_tilde: np.ndarray
    m_hat: np.ndarray
    factors: FactorPair
    lam: float
    sigma_pilot: float
    diagnostics: SolveDiagnostics

    def target_estimates(self):
        return {self.sub.to_parent(i, j): float(self.m_hat[i, j]) for i, j in self.sub.target}

    def proxies(self):
        return assumption_proxies(self.factors)


def assumption_proxies(factors):
    """Empirical stand-ins for the condition number and incoherence of a fit.

    ``condition_number`` is ``d_1 / d_r`` of the penalized fit's singular
    values; the coherences are ``(n / r) max_i ||U_i||^2`` for the left and
    right singular vectors. Reported only, never enforced.
    """
    d = np.sum(factors.x_tilde ** 2, axis=0)
    r = d.size
    u = factors.x_tilde / np.sqrt(d)
    v = factors.z_tilde / np.sqrt(d)
    return {
        "condition_number": float(d[0] / d[-1]),
        "row_coherence": float(u.shape[0] / r * np.max(np.sum(u * u, axis=1))),
        "col_coherence": float(v.shape[0] / r * np.max(np.sum(v * v, axis=1))),
    }


@dataclass(frozen=True, eq=False)
class LowRankEstimate:
    """Completed panel with tuning and solver records.

    ``completed`` keeps observed values; ``fitted`` is the average debiased
    fit (NaN where no submatrix covered the entry, and the rank-``r``
    projection of the panel when it is fully observed).
    """

    completed: np.ndarray
    fitted: np.ndarray
    rank: int
    sigma_hat: float
    lambdas: tuple
    diagnostics: tuple
    pattern: object
    n_subproblems: int = 0
    proxies: tuple = ()
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "pattern": self.pattern.to_dict(),
            "rank": self.rank,
            "sigma_hat": self.sigma_hat,
            "n_subproblems": self.n_subproblems,
            "subproblems": [
                {"lambda": lam, **d.to_dict(), **p}
                for lam, d, p in zip(self.lambdas, self.diagnostics, self.proxies or [{}] * len(self.lambdas))
            ],
            **self.extras,
        }


def _complete_block(sub):
    """Rows/columns of a submatrix that are fully observed."""
    rows = np.flatnonzero(sub.mask.all(axis=1))
    cols = np.flatnonzero(sub.mask.all(axis=0))
    return rows, cols


def pilot_sigma(sub, r):
    """Pilot noise scale from the fully observed part of a submatrix."""
    rows, cols = _complete_block(sub)
    if min(len(rows), len(cols)) <= r:
        raise ValueError(f"fully observed block {len(rows)}x{len(cols)} is too small for rank {r}")
    return estimate_sigma_initial(sub.values[np.ix_(rows, cols)], r)


def subproblem_lambda(sub, r, c_lambda=2.0):
    """``select_lambda`` on the pilot scale, floored at ``1e-6 * ||mask * Y||_F``."""
    sigma = pilot_sigma(sub, r)
    lam = select_lambda(sigma, *sub.shape, c_lambda)
    floor = LAMBDA_FLOOR * float(np.linalg.norm(np.where(sub.mask, sub.values, 0.0)))
    return max(lam, floor), sigma


def fit_subproblem(sub, r, opts=None, lam=None):
    """Solve, debias and de-shrink one submatrix.

    ``lam`` overrides the data-driven penalty (``sub.lam`` is used when set).
    """
    opts = opts or SolverOptions()
    sigma = math.nan
    if lam is None:
        lam = sub.lam
    if lam is None:
        lam, sigma = subproblem_lambda(sub, r, opts.lambda_constant)
    m_tilde, diag = solve_nuclear(sub.values, sub.mask, lam, opts)
    m_hat = debias_project(m_tilde, sub, r)
    factors = deshrink_factors(m_tilde, lam, r)
    return SubFit(sub, m_tilde, m_hat, factors, float(lam), sigma, diag)


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("MNAR_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def fit_all(subs, r, opts=None, lam=None, threads=1):
    """Fit a list of submatrices, concurrently when ``threads > 1``.

    Results come back in input order regardless of the thread count.
    """
    if threads <= 1 or len(subs) <= 1:
        return [fit_subproblem(s, r, opts, lam) for s in subs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: fit_subproblem(s, r, opts, lam), subs))


def always_observed_block(pattern):
    """Rows and columns of the largest block shared by every submatrix."""
    n, t = pattern.shape
    if pattern.kind == FULLY_OBSERVED:
        return tuple(range(n)), tuple(range(t))
    if pattern.is_block:
        return pattern.control_units, pattern.pre_periods
    if pattern.kind == STAGGERED:
        return untreated_before(pattern, t), tuple(range(pattern.adoption_times[0]))
    raise ValueError(f"no always-observed block for a {pattern.kind} pattern")


def choose_rank(panel, pattern, rank="auto", r_max=DEFAULT_R_MAX):
    """Return ``rank`` as an int, estimating it on the always-observed block for ``"auto"``."""
    if rank != "auto":
        r = int(rank)
        if r < 1:
            raise ValueError("rank must be a positive integer")
        return r
    rows, cols = always_observed_block(pattern)
    block = panel.values[np.ix_(rows, cols)]
    cap = min(int(r_max), min(block.shape) - 1)
    if cap < 1:
        raise ValueError("always-observed block too small to estimate the rank")
    return estimate_rank(block, cap)


def complete_panel(panel: ObservedPanel, rank="auto", cap=None, opts=None, lam=None,
                   threads=1, r_max=DEFAULT_R_MAX):
    """Fill every missing entry of ``panel`` with debiased subgroup estimates.

    Parameters
    ----------
    panel : ObservedPanel
    rank : int or "auto"
        Rank ``r``; ``"auto"`` uses the eigenvalue-ratio rule on the
        always-observed block.
    cap : int, optional
        Group size cap; defaults to ``floor(sqrt(min(N0, T0)))``.
    opts : SolverOptions, optional
    lam : float, optional
        Fixed penalty for every submatrix instead of the data-driven rule.
    threads : int
        Concurrent submatrix fits.

    Returns
    -------
    LowRankEstimate

    Raises
    ------
    UnsupportedPatternError
        For irregular missing patterns.
    RankCollapseError
        When a penalized fit has rank below ``r``.
    """
    pattern = classify_pattern(panel)
    r = choose_rank(panel, pattern, rank, r_max)
    subs = completion_plan(panel, pattern, cap)
    rows, cols = always_observed_block(pattern)
    if not subs:
        fitted = rank_r_project(panel.values, r) if r < min(panel.shape) else panel.values.copy()
        resid = panel.values - fitted
        sigma = float(np.sqrt(np.mean(resid ** 2)))
        return LowRankEstimate(panel.values.copy(), fitted, r, sigma, (), (), pattern, 0)
    fits = fit_all(subs, r, opts, lam, threads)
    acc = Reassembler(panel.shape)
    for f in fits:
        acc.add(f.sub, f.m_hat)
    comp = acc.result(panel)
    idx = np.ix_(rows, cols)
    resid = panel.values[idx] - comp.fitted[idx]
    sigma = float(np.sqrt(np.mean(resid ** 2)))
    return LowRankEstimate(
        comp.completed,
        comp.fitted,
        r,
        sigma,
        tuple(f.lam for f in fits),
        tuple(f.diagnostics for f in fits),
        pattern,
        len(fits),
        tuple(f.proxies() for f in fits),
    )
