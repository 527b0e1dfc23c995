"""Rank-r debiasing of penalized fits and de-shrunken factor estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankCollapseError
from .solver import svd

RANK_COLLAPSE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class FactorPair:
    """Row and column factors of a rank-``r`` fit.

    ``x_tilde``/``z_tilde`` are ``U D^{1/2}``/``V D^{1/2}`` from the penalized
    fit; ``x_hat``/``z_hat`` are the same after undoing the shrinkage.
    """

    x_hat: np.ndarray
    z_hat: np.ndarray
    x_tilde: np.ndarray
    z_tilde: np.ndarray
    lam: float
    rank: int


def rank_r_project(b, r):
    """Best rank-``r`` approximation in Frobenius norm (truncated SVD)."""
    b = np.asarray(b, dtype=np.float64)
    if not 1 <= r <= min(b.shape):
        raise ValueError(f"rank {r} out of range for shape {b.shape}")
    u, s, vt = svd(b, r)
    return (u * s) @ vt


def debias_project(m_tilde, sub, r):
    """Splice observed data into the penalized fit, then project to rank ``r``.

    ``sub`` is anything with ``values`` and ``mask`` attributes (a
    :class:`~mnarmc.subgroup.SubProblem` or an ``ObservedPanel``).
    """
    m_tilde = np.asarray(m_tilde, dtype=np.float64)
    mask = np.asarray(sub.mask, dtype=bool)
    if m_tilde.shape != mask.shape:
        raise ValueError(f"fit shape {m_tilde.shape} does not match subproblem {mask.shape}")
    spliced = np.where(mask, sub.values, m_tilde)
    return rank_r_project(spliced, r)


def _deshrink(x, lam):
    gram = x.T @ x
    w, q = np.linalg.eigh(gram)
    # I + lam * G^{-1} shares eigenvectors with G
    core = (q * np.sqrt(1.0 + lam / w)) @ q.T
    return x @ core


def deshrink_factors(m_tilde, lam, r):
    """Factors of ``P_r(m_tilde)`` rescaled by ``(I + lam (X'X)^{-1})^{1/2}``.

    Raises
    ------
    RankCollapseError
        If the ``r``-th singular value is below ``1e-12`` times the first.
    """
    m_tilde = np.asarray(m_tilde, dtype=np.float64)
    if not 1 <= r <= min(m_tilde.shape):
        raise ValueError(f"rank {r} out of range for shape {m_tilde.shape}")
    u, s, vt = svd(m_tilde, r)
    if not s[0] > 0 or s[r - 1] < RANK_COLLAPSE_RTOL * s[0]:
        raise RankCollapseError(
            f"penalized fit has rank below {r} (singular values {s.tolist()}); lower the penalty or the rank"
        )
    root = np.sqrt(s)
    x_t = u * root
    z_t = vt.T * root
    if lam == 0:
        return FactorPair(x_t.copy(), z_t.copy(), x_t, z_t, 0.0, r)
    return FactorPair(_deshrink(x_t, lam), _deshrink(z_t, lam), x_t, z_t, float(lam), r)
