"""Multi-treatment panels: effect series, their variances and specification tests.

Outcomes follow ``y_it = m^{(d_i)}_it + x_it' beta + e_it`` where every unit
is untreated (``d = 0``) before the pilot starts and receives its assigned
treatment afterwards. For each treatment ``d`` the panel ``Y^(d)`` keeps all
pre-pilot observations and the pilot-period observations of units assigned
to ``d``; completing it gives ``m^(d)`` for every unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .debias import rank_r_project
from .errors import PanelError
from .inference import (
    GroupFactors,
    LinearInfluence,
    fit_group_average,
    normal_quantile,
)
from .panel import BLOCK_KINDS, ObservedPanel, TreatmentAssignment, classify_pattern
from .solver import SolverOptions

DEFAULT_LEVELS = (0.90, 0.95, 0.99)


@dataclass(frozen=True, eq=False)
class TreatmentPanel:
    """Observed outcomes with their assignment and optional covariate adjustment.

    ``covariates`` has shape ``(N, T, p)`` and ``beta`` length ``p``; both
    or neither must be given. ``beta`` is treated as known.
    """

    base: ObservedPanel
    assignment: TreatmentAssignment
    beta: np.ndarray = None
    covariates: np.ndarray = None

    def __post_init__(self):
        n, t = self.base.shape
        if self.assignment.n_units != n:
            raise PanelError(f"assignment covers {self.assignment.n_units} units, panel has {n}")
        if self.assignment.pilot_start >= t:
            raise PanelError("pilot start lies beyond the last period")
        if (self.beta is None) != (self.covariates is None):
            raise PanelError("beta and covariates must be given together")
        if self.beta is not None:
            beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
            cov = np.asarray(self.covariates, dtype=np.float64)
            if cov.ndim == 2:
                cov = cov[:, :, None]
            if cov.shape != (n, t, beta.size):
                raise PanelError(f"covariates shape {cov.shape} does not match ({n}, {t}, {beta.size})")
            object.__setattr__(self, "beta", beta)
            object.__setattr__(self, "covariates", cov)

    @property
    def covariate_adjusted(self):
        return self.beta is not None

    def adjusted_values(self):
        if self.beta is None:
            return self.base.values
        return self.base.values - self.covariates @ self.beta

    def panel(self, d):
        return build_treatment_panel(self.base, self.assignment, d, self.beta, self.covariates)


def build_treatment_panel(base, assignment, d, beta=None, covariates=None):
    """Panel ``Y^(d)``: pre-pilot data for everyone plus pilot data of units in ``I_d``.

    Returns ``(ObservedPanel, MissingPattern)``. With ``beta`` the values are
    ``y - x' beta``.
    """
    d = int(d)
    if d not in assignment.groups:
        raise PanelError(f"unknown treatment {d}")
    values = base.values
    if beta is not None:
        tp = TreatmentPanel(base, assignment, beta, covariates)
        values = tp.adjusted_values()
    n, t = base.shape
    keep = np.zeros((n, t), dtype=bool)
    keep[:, : assignment.pilot_start] = True
    keep[list(assignment.groups[d]), :] = True
    mask = base.mask & keep
    panel = ObservedPanel(np.where(mask, values, np.nan), mask, base.unit_labels, base.time_labels)
    pattern = classify_pattern(panel)
    if pattern.kind not in BLOCK_KINDS:
        raise PanelError(f"treatment panel {d} is not block-missing ({pattern.kind}); "
                         "the base panel must be fully observed")
    return panel, pattern


def pre_period_sigma2(tp, r):
    """Residual variance of the rank-``r`` fit to all units' pre-pilot outcomes."""
    block = tp.adjusted_values()[:, : tp.assignment.pilot_start]
    if not np.all(np.isfinite(block)):
        raise PanelError("pre-pilot outcomes must be fully observed")
    if r >= min(block.shape):
        raise ValueError("rank too large for the pre-pilot block")
    resid = block - rank_r_project(block, r)
    return float(np.mean(resid * resid))


@dataclass(frozen=True, eq=False)
class EffectSeries:
    """Group-averaged effects per treatment and period.

    ``mu[(d, t)]`` compares treatment ``d`` with control and
    ``theta[(d, t)]`` with treatment ``d - 1``. ``window_*`` hold window
    averages of ``theta`` keyed by ``(d, window index)``. ``unit_theta``
    and ``unit_var_theta`` (when requested) map ``d`` to arrays of shape
    ``(len(group), len(periods))``.
    """

    mu: dict
    theta: dict
    var_mu: dict
    var_theta: dict
    group: tuple
    periods: tuple
    sigma2: float
    windows: tuple = ()
    window_theta: dict = field(default_factory=dict)
    window_var: dict = field(default_factory=dict)
    unit_theta: dict = None
    unit_var_theta: dict = None

    @property
    def treatments(self):
        return tuple(sorted({d for d, _ in self.mu}))

    def ci(self, which, d, t, level=0.95):
        est = getattr(self, which)[(d, t)]
        var = getattr(self, "var_" + which)[(d, t)]
        half = normal_quantile(0.5 + level / 2) * math.sqrt(var)
        return est - half, est + half

    def rows(self):
        """Records ``(d, t, mu, theta, var_mu, var_theta)`` sorted by ``(d, t)``."""
        return [(d, t, self.mu[(d, t)], self.theta[(d, t)], self.var_mu[(d, t)], self.var_theta[(d, t)])
                for d, t in sorted(self.mu)]


def _unit_terms(factors):
    """Per unit: (row-influence vector keyed by ref units, column influence keyed by periods)."""
    out = {}
    for g in factors:
        a = g.row_influence()
        h = g.col_influence()
        for k, u in enumerate(g.units):
            out[u] = (a[k], dict(zip(g.pre_periods, h)))
    return out


def _unit_contrast_var(ta, tb, sigma2):
    ra, ca = ta
    rb, cb = tb
    col = 0.0
    for s in set(ca) | set(cb):
        diff = ca.get(s, 0.0) - cb.get(s, 0.0)
        col += diff * diff
    return sigma2 * (float(ra @ ra) + float(rb @ rb) + col)


def estimate_effects(tp, group, r, opts=None, periods=None, cap=None, windows=None,
                     unit_level=False, sigma2=None, threads=1):
    """Effect series ``mu`` and ``theta`` averaged over ``group``.

    Parameters
    ----------
    tp : TreatmentPanel
    group : iterable of int
        Units to average over.
    r : int
        Rank shared by all potential-outcome matrices.
    periods : iterable of int, optional
        Pilot periods to estimate; all of them by default.
    windows : sequence of sequences of int, optional
        Period windows over which ``theta`` is averaged (e.g. weeks).
    unit_level : bool
        Also return per-unit ``theta`` and its variance, as used by the
        specification test.
    sigma2 : float, optional
        Noise variance; estimated from the pre-pilot block by default.

    Returns
    -------
    EffectSeries
    """
    opts = opts or SolverOptions()
    asg = tp.assignment
    ds = asg.treatments
    if ds != tuple(range(len(ds))):
        raise PanelError(f"treatment ids must be 0..D, got {ds}")
    group = tuple(sorted(set(int(i) for i in group)))
    if not group:
        raise ValueError("empty group")
    t_total = tp.base.shape[1]
    pilot = tuple(range(asg.pilot_start, t_total))
    periods = pilot if periods is None else tuple(int(t) for t in periods)
    if not periods or any(t not in pilot for t in periods):
        raise ValueError("periods must be nonempty and inside the pilot range")
    windows = tuple(tuple(int(t) for t in w) for w in (windows or ()))
    for w in windows:
        if not w or any(t not in periods for t in w):
            raise ValueError("every window must be a nonempty subset of the estimated periods")
    if sigma2 is None:
        sigma2 = pre_period_sigma2(tp, r)
    panels = {d: tp.panel(d) for d in ds}

    mu, theta, var_mu, var_theta = {}, {}, {}, {}
    wsum = {}
    unit_theta = {d: np.zeros((len(group), len(periods))) for d in ds[1:]} if unit_level else None
    unit_var = {d: np.zeros((len(group), len(periods))) for d in ds[1:]} if unit_level else None
    for k, t in enumerate(periods):
        infl, terms, ests = {}, {}, {}
        for d in ds:
            panel, pattern = panels[d]
            fit = fit_group_average(panel, pattern, group, t, r, opts, cap, key=(d, t), threads=threads)
            infl[d] = fit.influence
            if unit_level:
                terms[d] = _unit_terms(fit.factors)
                ests[d] = fit.unit_estimates
        for d in ds[1:]:
            m = infl[d] - infl[0]
            th = infl[d] - infl[d - 1]
            mu[(d, t)] = m.estimate
            theta[(d, t)] = th.estimate
            var_mu[(d, t)] = m.variance(sigma2)
            var_theta[(d, t)] = th.variance(sigma2)
            for w_idx, w in enumerate(windows):
                if t in w:
                    key = (d, w_idx)
                    wsum[key] = th if key not in wsum else wsum[key] + th
            if unit_level:
                for j, u in enumerate(group):
                    unit_theta[d][j, k] = ests[d][u] - ests[d - 1][u]
                    unit_var[d][j, k] = _unit_contrast_var(terms[d][u], terms[d - 1][u], sigma2)
    window_theta, window_var = {}, {}
    for (d, w_idx), total in wsum.items():
        avg = total.scale(1.0 / len(windows[w_idx]))
        window_theta[(d, w_idx)] = avg.estimate
        window_var[(d, w_idx)] = avg.variance(sigma2)
    return EffectSeries(mu, theta, var_mu, var_theta, group, periods, float(sigma2), windows,
                        window_theta, window_var, unit_theta, unit_var)


def effect_variance(infl_d, infl_dprime, sigma2):
    """Variance of the contrast between two treatments' group averages.

    Both arguments are :class:`~mnarmc.inference.LinearInfluence` objects over
    the same units, from the fits of ``Y^(d)`` and ``Y^(d')``. Row terms add
    (different units carry the target-period noise); column terms are
    differenced because pre-pilot noise is shared.
    """
    return (infl_d - infl_dprime).variance(sigma2)


def contrast_variance_expanded(fd, fdp, sigma2):
    """Expanded form of :func:`effect_variance` for one submatrix per treatment.

    ``fd`` and ``fdp`` are :class:`~mnarmc.inference.GroupFactors` sharing the
    same pre-pilot periods. Returns the two row terms plus
    ``sigma2/|G| (z_d' W_d^{-1} z_d + z_d'' W_d'^{-1} z_d' - 2 z_d' W_d^{-1} C W_d'^{-1} z_d')``
    with ``C = sum_s z_{d,s} z_{d',s}'``.
    """
    if tuple(fd.pre_periods) != tuple(fdp.pre_periods) or tuple(fd.units) != tuple(fdp.units):
        raise ValueError("expanded form needs identical units and pre-periods")
    size = len(fd.units)

    def row_term(f):
        xbar = f.x_group.mean(axis=0)
        s = f.x_ref.T @ f.x_ref
        return float(xbar @ np.linalg.solve(s, xbar))

    wd = fd.z_pre.T @ fd.z_pre
    wp = fdp.z_pre.T @ fdp.z_pre
    ad = np.linalg.solve(wd, fd.z_target)
    ap = np.linalg.solve(wp, fdp.z_target)
    cross = fd.z_pre.T @ fdp.z_pre
    col = fd.z_target @ ad + fdp.z_target @ ap - 2.0 * ad @ cross @ ap
    return sigma2 * (row_term(fd) + row_term(fdp) + col / size)


def aggregate_window_variance(influences_d, influences_prev, sigma2):
    """Variance of ``theta`` averaged over a window of periods.

    ``influences_d[k]`` and ``influences_prev[k]`` are the group-average
    influences of treatments ``d`` and ``d - 1`` at the ``k``-th period.
    """
    if len(influences_d) != len(influences_prev):
        raise ValueError("window influences must pair up")
    if not influences_d:
        raise ValueError("empty window")
    total = None
    for a, b in zip(influences_d, influences_prev):
        diff = a - b
        total = diff if total is None else total + diff
    return total.scale(1.0 / len(influences_d)).variance(sigma2)


def weekly_windows(periods, k):
    """Consecutive windows of ``k`` periods; the last may be shorter."""
    periods = tuple(periods)
    if k < 1:
        raise ValueError("window length must be >= 1")
    return tuple(periods[i:i + k] for i in range(0, len(periods), k))


def estimate_unit_effects(unit_theta):
    """Per-unit mean over pilot periods of a ``(units, periods)`` effect array."""
    arr = np.asarray(unit_theta, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError("need a (units, periods) array with at least one period")
    return arr.mean(axis=1)


def bonferroni_critical_value(n, alpha=0.05):
    """Two-sided Bonferroni critical value ``Phi^{-1}(1 - alpha / (2 n))``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return normal_quantile(1.0 - alpha / (2.0 * n))


def twfe_effects(y, treated):
    """Two-way fixed-effects treatment coefficients.

    Parameters
    ----------
    y : ndarray, shape (N, T)
        Fully observed outcomes.
    treated : mapping d -> bool array (N, T)
        Indicator of unit-period cells under treatment ``d``.

    Returns
    -------
    dict
        ``d -> coefficient`` from OLS of two-way demeaned ``y`` on the
        two-way demeaned indicators.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("two-way fixed effects needs a fully observed panel")

    def demean(a):
        return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean()

    keys = sorted(treated)
    x = np.column_stack([demean(np.asarray(treated[d], dtype=np.float64)).ravel() for d in keys])
    coef, *_ = np.linalg.lstsq(x, demean(y).ravel(), rcond=None)
    return dict(zip(keys, coef.tolist()))


def twfe_theta(tp):
    """Two-way fixed-effects ``theta^(d) = mu^(d) - mu^(d-1)`` for each ``d >= 1``."""
    asg = tp.assignment
    n, t = tp.base.shape
    treated = {}
    for d in asg.treatments[1:]:
        ind = np.zeros((n, t), dtype=bool)
        ind[np.ix_(list(asg.groups[d]), range(asg.pilot_start, t))] = True
        treated[d] = ind
    mu = twfe_effects(tp.adjusted_values(), treated)
    mu[0] = 0.0
    return {d: mu[d] - mu[d - 1] for d in asg.treatments[1:]}


@dataclass(frozen=True)
class SpecTestResult:
    statistic: float
    critical_values: dict
    reject: dict
    n_draws: int
    n_cells: int

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "critical_values": {str(k): v for k, v in self.critical_values.items()},
            "reject": {str(k): v for k, v in self.reject.items()},
            "n_draws": self.n_draws,
            "n_cells": self.n_cells,
        }


def _draw_stream(seed, k):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(k,))))


def bootstrap_max_abs(n_cells, n_draws, seed=0, chunk=64):
    """``n_draws`` realizations of ``max_k |g_k|`` over ``n_cells`` standard normals.

    Draw ``b`` uses its own Philox substream keyed by ``(seed, b)``, so the
    result does not depend on how draws are batched.
    """
    out = np.empty(n_draws)
    for b in range(n_draws):
        rng = _draw_stream(seed, b)
        m = 0.0
        for start in range(0, n_cells, 1 << 16):
            g = rng.standard_normal(min(1 << 16, n_cells - start))
            m = max(m, float(np.max(np.abs(g))))
        out[b] = m
    return out


def spec_test(effects, variances, baseline, n_draws=1000, seed=0, levels=DEFAULT_LEVELS):
    """Max-|t| specification test with a Gaussian multiplier bootstrap.

    Parameters
    ----------
    effects, variances : array_like or mapping d -> array_like
        Cell estimates and their variances (same layout).
    baseline : float or mapping d -> float
        Value each cell is compared with (per treatment for mappings).
    n_draws : int
        Bootstrap draws (at least 100).
    seed : int
    levels : sequence of float
        Confidence levels; the critical value is the ``level`` quantile of
        the bootstrap maxima.

    Returns
    -------
    SpecTestResult
    """
    if n_draws < 100:
        raise ValueError("n_draws must be >= 100")
    if isinstance(effects, dict):
        keys = sorted(effects)
        base = baseline if isinstance(baseline, dict) else {d: baseline for d in keys}
        diffs = [np.ravel(np.asarray(effects[d], dtype=np.float64) - base[d]) for d in keys]
        var = [np.ravel(np.asarray(variances[d], dtype=np.float64)) for d in keys]
        diff, var = np.concatenate(diffs), np.concatenate(var)
    else:
        diff = np.ravel(np.asarray(effects, dtype=np.float64) - np.asarray(baseline, dtype=np.float64))
        var = np.ravel(np.asarray(variances, dtype=np.float64))
    if diff.shape != var.shape or diff.size == 0:
        raise ValueError("effects and variances must be nonempty with matching shapes")
    if not np.all(var > 0):
        raise ValueError("every cell needs a positive variance")
    stat = float(np.max(np.abs(diff) / np.sqrt(var)))
    draws = bootstrap_max_abs(diff.size, int(n_draws), seed)
    levels = tuple(sorted(float(l) for l in levels))
    for l in levels:
        if not 0 < l < 1:
            raise ValueError("levels must lie in (0, 1)")
    cvs = {l: float(np.quantile(draws, l)) for l in levels}
    return SpecTestResult(stat, cvs, {l: stat > c for l, c in cvs.items()}, int(n_draws), int(diff.size))
