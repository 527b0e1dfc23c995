"""Variance estimates and confidence intervals for group averages of missing entries.

A debiased group average is, to first order, the truth plus a linear
combination of noise terms:

* a *row* part, from the noise of the reference units at the target
  period, with weight ``mean_i X_i' S^{-1} X_j`` on reference unit ``j``;
* a *column* part, from each target unit's own noise in its observed
  periods, with weight ``z_t0' W^{-1} z_s / |G|`` on period ``s``.

:class:`LinearInfluence` stores those weights in parent coordinates so that
differences (treatment contrasts) and window averages are plain linear
algebra, and the variance is ``sigma^2`` times the squared norm of the
weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import SingularGramError
from .panel import classify_pattern
from .pipeline import fit_all
from .solver import SolverOptions
from .subgroup import assemble_inference, split_inference_group

GRAM_COND_MAX = 1e12


def normal_quantile(p):
    """Standard normal quantile ``Phi^{-1}(p)``."""
    p = float(p)
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    return float(ndtri(p))


def _check_level(level):
    level = float(level)
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return level


def group_average_ci(estimate, variance, level=0.95):
    """Gaussian interval ``estimate +- z_{(1+level)/2} sqrt(variance)``."""
    level = _check_level(level)
    if not variance > 0:
        raise ValueError("variance must be positive")
    half = normal_quantile(0.5 + level / 2) * math.sqrt(variance)
    return estimate - half, estimate + half


def sigma_hat(block, m_hat_block):
    """Root mean squared residual over a fully observed block."""
    block = np.asarray(block, dtype=np.float64)
    m_hat_block = np.asarray(m_hat_block, dtype=np.float64)
    if block.size == 0:
        raise ValueError("empty block")
    if block.shape != m_hat_block.shape:
        raise ValueError("block and fit shapes differ")
    if not np.all(np.isfinite(block)):
        raise ValueError("block must be fully observed")
    resid = block - m_hat_block
    return math.sqrt(float(np.mean(resid * resid)))


def _gram_solve(f, rhs):
    gram = f.T @ f
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_MAX:
        raise SingularGramError(f"Gram matrix condition number {cond:.3g} exceeds {GRAM_COND_MAX:.0e}")
    return np.linalg.solve(gram, rhs)


@dataclass(frozen=True, eq=False)
class GroupFactors:
    """Factor surrogates of one inference submatrix.

    ``x_ref`` are the reference-unit rows of the de-shrunken row factors,
    ``x_group`` the rows of the target units, ``z_pre`` the column factors of
    the observed periods and ``z_target`` the column factor of the target
    period. Index tuples give the parent positions.
    """

    x_ref: np.ndarray
    x_group: np.ndarray
    z_pre: np.ndarray
    z_target: np.ndarray
    ref_units: tuple
    units: tuple
    pre_periods: tuple

    @classmethod
    def from_fit(cls, fit):
        sub = fit.sub
        x, z = fit.factors.x_hat, fit.factors.z_hat
        (tcol,) = sub.target_cols
        trows = [i for i, _ in sub.target]
        pre = [j for j in range(sub.shape[1]) if j != tcol]
        ref = list(sub.reference_rows)
        return cls(
            x[ref], x[trows], z[pre], z[tcol],
            tuple(sub.row_map[i] for i in ref),
            tuple(sub.row_map[i] for i in trows),
            tuple(sub.col_map[j] for j in pre),
        )

    def row_influence(self):
        """``X_i' S^{-1} X_j`` for target units ``i`` (rows) and reference units ``j``."""
        return self.x_group @ _gram_solve(self.x_ref, self.x_ref.T)

    def col_influence(self):
        """``z_t0' W^{-1} z_s`` over the observed periods ``s``."""
        return self.z_pre @ _gram_solve(self.z_pre, self.z_target)


@dataclass(frozen=True, eq=False)
class LinearInfluence:
    """First-order noise weights of a linear estimator.

    ``row`` maps a noise source key (e.g. ``(panel id, period)``) to a
    weight vector over units; ``col`` is a ``(unit, period)`` weight matrix
    on shared pre-period noise, with row order given by ``units``.
    """

    estimate: float
    row: dict
    col: np.ndarray
    units: tuple

    def _check(self, other):
        if self.units != other.units or self.col.shape != other.col.shape:
            raise ValueError("influences refer to different unit sets")

    def __sub__(self, other):
        self._check(other)
        row = dict(self.row)
        for k, v in other.row.items():
            row[k] = row[k] - v if k in row else -v
        return LinearInfluence(self.estimate - other.estimate, row, self.col - other.col, self.units)

    def __add__(self, other):
        self._check(other)
        row = dict(self.row)
        for k, v in other.row.items():
            row[k] = row[k] + v if k in row else v
        return LinearInfluence(self.estimate + other.estimate, row, self.col + other.col, self.units)

    def scale(self, c):
        return LinearInfluence(c * self.estimate, {k: c * v for k, v in self.row.items()}, c * self.col, self.units)

    def components(self, sigma2):
        """``(row_component, col_component)``; their sum is the variance."""
        row = sigma2 * sum(float(v @ v) for v in self.row.values())
        col = sigma2 * float(np.sum(self.col * self.col))
        return row, col

    def variance(self, sigma2):
        return sum(self.components(sigma2))


def mean_influence(items):
    """Average of influences (window aggregation)."""
    items = list(items)
    if not items:
        raise ValueError("empty window")
    total = items[0]
    for x in items[1:]:
        total = total + x
    return total.scale(1.0 / len(items))


def build_influence(groups, estimates, shape, key="y"):
    """Influence of the group average implied by per-submatrix factors.

    Parameters
    ----------
    groups : sequence of GroupFactors
        One per submatrix; their ``units`` together form ``G``.
    estimates : mapping unit -> float
        Debiased estimate of each unit's entry.
    shape : (N, T)
        Parent panel shape.
    key : hashable
        Label of the row-noise source (all groups share the target period).
    """
    n, t = shape
    units = tuple(sorted(u for g in groups for u in g.units))
    if len(set(units)) != len(units):
        raise ValueError("groups overlap")
    size = len(units)
    pos = {u: k for k, u in enumerate(units)}
    row = np.zeros(n)
    col = np.zeros((size, t))
    for g in groups:
        a = g.row_influence()
        row[list(g.ref_units)] += a.sum(axis=0) / size
        h = g.col_influence() / size
        for u in g.units:
            col[pos[u], list(g.pre_periods)] = h
    est = float(np.mean([estimates[u] for u in units]))
    return LinearInfluence(est, {key: row}, col, units)


def unit_influences(factors, estimates, shape, key="y"):
    """Per-unit influences (groups of size one) from fitted :class:`GroupFactors`."""
    n, t = shape
    out = {}
    for g in factors:
        a = g.row_influence()
        h = g.col_influence()
        pre = list(g.pre_periods)
        ref = list(g.ref_units)
        for k, u in enumerate(g.units):
            row = np.zeros(n)
            row[ref] = a[k]
            col = np.zeros((1, t))
            col[0, pre] = h
            out[u] = LinearInfluence(float(estimates[u]), {key: row}, col, (u,))
    return out


def variance_group_average(groups, sigma2, shape=None):
    """``(row_component, col_component, variance)`` of a group average.

    ``groups`` is a sequence of :class:`GroupFactors`; the row part sums over
    reference units and the column part over each group's observed periods.
    """
    if shape is None:
        n = 1 + max(max(g.ref_units) for g in groups)
        t = 1 + max(max(g.pre_periods) for g in groups)
        shape = (n, t)
    infl = build_influence(groups, {u: 0.0 for g in groups for u in g.units}, shape)
    row, col = infl.components(sigma2)
    return row, col, row + col


@dataclass(frozen=True, eq=False)
class GroupAverageFit:
    """Everything needed to form a group average and its variance."""

    influence: LinearInfluence
    unit_estimates: dict
    factors: tuple
    fits: tuple
    sigma2: float
    t0: int

    @property
    def estimate(self):
        return self.influence.estimate


def _sigma2_from_fits(panel, fits, t0):
    """Residual variance on the reference units and the periods every submatrix shares."""
    ref = fits[0].sub.row_map[: fits[0].sub.n_reference]
    common = None
    for f in fits:
        if f.sub.row_map[: f.sub.n_reference] != ref:
            raise ValueError("inference submatrices disagree on the reference units")
        cols = set(f.sub.col_map) - {t0}
        common = cols if common is None else common & cols
    common = sorted(common)
    acc = np.zeros((len(ref), len(common)))
    for f in fits:
        cpos = [f.sub.col_map.index(j) for j in common]
        acc += f.m_hat[: len(ref)][:, cpos]
    acc /= len(fits)
    block = panel.values[np.ix_(ref, common)]
    return sigma_hat(block, acc) ** 2


def fit_group_average(panel, pattern, group, t0, r, opts=None, cap=None, lam=None,
                      key="y", threads=1):
    """Fit the inference submatrices for ``group`` at period ``t0``.

    Units observed at ``t0`` share the fully observed reference submatrix;
    the rest are split by adoption time and then by ``cap``.
    """
    pattern = pattern or classify_pattern(panel)
    t0 = int(t0)
    if not 0 <= t0 < panel.shape[1]:
        raise ValueError(f"period {t0} outside the panel")
    g0, plan = split_inference_group(panel, pattern, group, t0, cap)
    subs = ([assemble_inference(panel, pattern, g0, t0)] if g0 else [])
    subs += [assemble_inference(panel, pattern, g, t0) for g in plan.groups]
    fits = fit_all(subs, r, opts, lam, threads)
    estimates = {}
    for f in fits:
        for (i, _), v in f.target_estimates().items():
            estimates[i] = v
    factors = tuple(GroupFactors.from_fit(f) for f in fits)
    infl = build_influence(factors, estimates, panel.shape, key)
    sigma2 = _sigma2_from_fits(panel, fits, t0)
    return GroupAverageFit(infl, estimates, factors, tuple(fits), sigma2, t0)


@dataclass(frozen=True)
class GroupAverageInference:
    estimate: float
    variance: float
    ci_lower: float
    ci_upper: float
    row_component: float
    col_component: float
    sigma_hat: float
    level: float
    n_groups: int = 1

    def ci(self, level=None):
        """Interval at another ``level`` from the same estimate and variance."""
        return group_average_ci(self.estimate, self.variance, self.level if level is None else level)

    def covers(self, value, level=None):
        lo, hi = self.ci(level)
        return lo <= value <= hi

    def to_dict(self):
        return {
            "estimate": self.estimate,
            "variance": self.variance,
            "ci": [self.ci_lower, self.ci_upper],
            "components": {"row": self.row_component, "col": self.col_component},
            "sigma_hat": self.sigma_hat,
            "level": self.level,
            "n_groups": self.n_groups,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["estimate"], d["variance"], d["ci"][0], d["ci"][1], d["components"]["row"],
                   d["components"]["col"], d["sigma_hat"], d["level"], d["n_groups"])


def summarize(estimate, influence, sigma2, level, n_groups=1):
    """Turn an influence and a noise variance into a :class:`GroupAverageInference`."""
    level = _check_level(level)
    row, col = influence.components(sigma2)
    var = row + col
    if var > 0:
        lo, hi = group_average_ci(estimate, var, level)
    else:
        lo = hi = estimate
    return GroupAverageInference(estimate, var, lo, hi, row, col, math.sqrt(sigma2), level, n_groups)


def infer_group_average(panel, pattern, group, t0, r, opts=None, level=0.95, cap=None,
                        lam=None, threads=1):
    """Estimate the mean of ``group``'s entries at period ``t0`` with a confidence interval.

    Parameters
    ----------
    panel : ObservedPanel
    pattern : MissingPattern or None
        Classified on the fly when None.
    group : iterable of int
        Unit indices; may mix missing and observed units.
    t0 : int
        Target period (0-based column).
    r : int
        Rank.
    opts : SolverOptions, optional
    level : float
        Confidence level in (0, 1).
    cap : int, optional
        Group size cap.

    Returns
    -------
    GroupAverageInference
        ``variance`` is ``sigma_hat^2`` times the squared influence weights.
        It can be zero only for exactly noiseless data.
    """
    _check_level(level)
    fit = fit_group_average(panel, pattern, group, t0, r, opts or SolverOptions(), cap, lam,
                            threads=threads)
    return summarize(fit.estimate, fit.influence, fit.sigma2, level, len(fit.fits))
