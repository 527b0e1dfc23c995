"""Synthetic designs and the Monte-Carlo harness for RMSE and coverage studies.

Every replication draws from its own Philox substream keyed by
``(seed, rep)``, so results do not depend on the order or the number of
workers used to run replications.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import MNARError
from .inference import infer_group_average, normal_quantile
from .panel import ObservedPanel, TreatmentAssignment, classify_pattern
from .pipeline import always_observed_block, complete_panel
from .solver import SolverOptions, estimate_sigma_initial, select_lambda, solve_nuclear
from .treatment import TreatmentPanel, estimate_effects

DESIGNS = ("staggered_basic", "interactive_effects", "tobacco_protocol")
DEFAULT_LEVELS = (0.90, 0.95, 0.99)
_S2 = math.sqrt(2.0)


def substream(seed, rep, stream=0):
    """Generator for replication ``rep``; ``stream`` separates independent uses."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(rep), int(stream)))))


@dataclass(frozen=True)
class SimConfig:
    """Design parameters for one simulation study.

    ``group_sizes`` lists the never-treated/control group first. For the
    staggered design ``change_points`` are the 0-based adoption columns of
    groups 1, 2, ...; for the interactive design ``change_points`` holds the
    single pilot start. ``unit_means`` and ``time_means`` give the scalar
    ``m`` in the factor mean ``(m, m) / sqrt(2)`` per group (units) or per
    treatment (periods).
    """

    design: str = "staggered_basic"
    group_sizes: tuple = (200, 100, 100, 100)
    n_periods: int = 500
    change_points: tuple = (200, 300, 400)
    unit_means: tuple = (2.5, 1.0, 1.5, 2.0)
    time_means: tuple = (1.0,)
    noise_sd: float = 1.0
    rank: int = 2
    beta: tuple = ()
    replications: int = 1000
    seed: int = 20240501
    target_group: int = 2
    fix_target: bool = False
    levels: tuple = DEFAULT_LEVELS
    lambda_constant: float = 2.0
    baseline: bool = True

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if int(self.replications) < 1:
            raise ValueError("replications must be >= 1")
        if any(int(s) < 1 for s in self.group_sizes) or int(self.n_periods) < 2:
            raise ValueError("sizes must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.rank != 2:
            raise ValueError("the built-in designs have two factors")
        for lvl in self.levels:
            if not 0 < lvl < 1:
                raise ValueError("levels must lie in (0, 1)")

    @classmethod
    def preset(cls, design, preset="paper", **overrides):
        """Full-scale defaults (``preset="paper"``) or a smaller CI variant."""
        if design == "staggered_basic":
            cfg = cls(design=design)
        elif design == "interactive_effects":
            cfg = cls(design=design, group_sizes=(250, 250, 250), n_periods=500, change_points=(250,),
                      unit_means=(1.0, 1.0, 1.0), time_means=(1.0, 1.5, 2.0), beta=(1.0, 1.0))
        elif design == "tobacco_protocol":
            cfg = cls(design=design, group_sizes=(38,), n_periods=31, change_points=(16, 21, 26),
                      noise_sd=2.0, baseline=False)
        else:
            raise ValueError(f"unknown design {design!r}")
        if preset == "ci":
            cfg = replace(cfg, replications=200)
        elif preset != "paper":
            raise ValueError("preset must be 'paper' or 'ci'")
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("group_sizes", "change_points", "unit_means", "time_means", "beta", "levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _factors(rng, n, mean):
    return rng.standard_normal((n, 2)) + mean / _S2


# ----------------------------------------------------------------- designs

def gen_staggered(cfg, seed, rep=0):
    """Staggered-adoption panel with ``m_it = zeta_i' eta_t``.

    Returns ``(panel, truth, pattern)``. Group ``g`` (1-based) is missing
    from column ``cfg.change_points[g-1]`` onward.
    """
    if len(cfg.change_points) != len(cfg.group_sizes) - 1:
        raise ValueError("need one adoption column per treated group")
    rng = substream(seed, rep)
    zeta = np.vstack([_factors(rng, s, m) for s, m in zip(cfg.group_sizes, cfg.unit_means)])
    eta = _factors(rng, cfg.n_periods, cfg.time_means[0])
    truth = zeta @ eta.T
    y = truth + cfg.noise_sd * rng.standard_normal(truth.shape)
    mask = np.ones(truth.shape, dtype=bool)
    start = cfg.group_sizes[0]
    for size, a in zip(cfg.group_sizes[1:], cfg.change_points):
        mask[start:start + size, a:] = False
        start += size
    panel = ObservedPanel(y, mask)
    return panel, truth, classify_pattern(panel)


@dataclass(frozen=True, eq=False)
class InteractiveSample:
    panel: TreatmentPanel
    truth: dict


def gen_interactive(cfg, seed, rep=0):
    """Multi-treatment interactive-effects panel.

    Unit factors share one distribution; period factors ``eta^(d)`` have
    mean ``(m_d, m_d) / sqrt(2)``. Before the pilot every unit follows
    ``d = 0``. Covariates: ``x1 ~ N(0, 1)`` everywhere and ``x2 ~ N(0, 1)``
    in pilot periods only, entering with coefficients ``cfg.beta``.
    """
    rng = substream(seed, rep)
    n = sum(cfg.group_sizes)
    t = cfg.n_periods
    (t0,) = cfg.change_points
    zeta = _factors(rng, n, cfg.unit_means[0])
    truth = {d: zeta @ _factors(rng, t, m).T for d, m in enumerate(cfg.time_means)}
    groups, start = {}, 0
    for d, size in enumerate(cfg.group_sizes):
        groups[d] = tuple(range(start, start + size))
        start += size
    y = truth[0].copy()
    for d, units in groups.items():
        y[list(units), t0:] = truth[d][list(units), t0:]
    beta = cov = None
    if cfg.beta:
        p = len(cfg.beta)
        cov = rng.standard_normal((n, t, p))
        if p > 1:
            cov[:, :t0, 1:] = 0.0
        beta = np.asarray(cfg.beta, dtype=np.float64)
        y = y + cov @ beta
    y = y + cfg.noise_sd * rng.standard_normal(y.shape)
    tp = TreatmentPanel(ObservedPanel(y), TreatmentAssignment(groups, t0, n), beta, cov)
    return InteractiveSample(tp, truth)


TOBACCO_YEARS = tuple(range(1970, 2001))


def tobacco_categories(base):
    """Category per row: percent change of the 1986-2000 mean over the 1970-1985 mean.

    ``severe`` if the change is at least -10%, ``moderate`` in [-15, -10),
    ``mild`` in [-20, -15) and ``good`` below -20%.
    """
    base = np.asarray(base, dtype=np.float64)
    split = TOBACCO_YEARS.index(1986)
    pre = base[:, :split].mean(axis=1)
    post = base[:, split:].mean(axis=1)
    change = 100.0 * (post - pre) / pre
    cats = np.where(change >= -10, "severe",
                    np.where(change >= -15, "moderate", np.where(change >= -20, "mild", "good")))
    return cats.tolist(), change


def synthetic_tobacco_base(seed, rep=0, noise_sd=2.0):
    """Rank-2 stand-in for 38 states x 31 years of per-capita sales.

    Returns ``(observed, truth)``; sales are ``level_i * (1 - slope_i * years)``
    plus noise, with slopes spread over the four categories.
    """
    rng = substream(seed, rep, 7)
    n, t = 38, len(TOBACCO_YEARS)
    level = rng.uniform(90.0, 160.0, n)
    slope = rng.uniform(0.0, 0.016, n)
    years = np.arange(t, dtype=np.float64)
    truth = np.outer(level, np.ones(t)) - np.outer(level * slope, years)
    return truth + noise_sd * rng.standard_normal((n, t)), truth


def gen_tobacco_protocol(base=None, seed=0, rep=0, truth=None):
    """Impose the category-driven adoption protocol on a 38 x 31 matrix.

    Half of the severe states (rounded up, chosen at random) adopt in 1986
    and the rest in 1991; moderate states split 1991/1996; mild states
    split 1996/never; good states never adopt.

    Returns ``(panel, truth, pattern, categories)``.
    """
    if base is None:
        base, truth = synthetic_tobacco_base(seed, rep)
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (38, len(TOBACCO_YEARS)):
        raise ValueError(f"base matrix must be 38 x {len(TOBACCO_YEARS)}, got {base.shape}")
    if not np.all(np.isfinite(base)):
        raise ValueError("base matrix must be fully observed")
    cats, _ = tobacco_categories(base)
    col = {y: TOBACCO_YEARS.index(y) for y in (1986, 1991, 1996)}
    plan = {"severe": (col[1986], col[1991]), "moderate": (col[1991], col[1996]), "mild": (col[1996], None)}
    rng = substream(seed, rep, 8)
    mask = np.ones(base.shape, dtype=bool)
    for cat, (early, late) in plan.items():
        members = np.array([i for i, c in enumerate(cats) if c == cat], dtype=int)
        if members.size == 0:
            continue
        perm = rng.permutation(members)
        k = math.ceil(members.size / 2)
        mask[perm[:k], early:] = False
        if late is not None:
            mask[perm[k:], late:] = False
    panel = ObservedPanel(base, mask, time_labels=[str(y) for y in TOBACCO_YEARS])
    return panel, (base if truth is None else truth), classify_pattern(panel), cats


# ----------------------------------------------------------------- harness

@dataclass
class ExperimentReport:
    """Per-replication records and summaries of a Monte-Carlo study."""

    design: str
    rmse: dict = field(default_factory=dict)
    coverage: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def standardized(self, target="pipeline"):
        return np.array([r["z"] for r in self.records if r["target"] == target and math.isfinite(r["z"])])

    def summary(self):
        return {
            "design": self.design,
            "replications": len({r["rep"] for r in self.records}),
            "failures": len(self.failures),
            "rmse": self.rmse,
            "coverage": {t: {str(k): v for k, v in c.items()} for t, c in self.coverage.items()},
            "wall_time": self.wall_time,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, default=float)

    def to_csv(self):
        buf = io.StringIO()
        cols = ["rep", "target", "estimate", "truth", "variance", "z", "baseline"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([_fmt(r.get(c)) for c in cols])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if not math.isfinite(v) else format(v, ".17g")
    return str(v)


def _record(rep, target, est, truth, var, baseline=None):
    z = (est - truth) / math.sqrt(var) if var > 0 else math.nan
    return {"rep": rep, "target": target, "estimate": float(est), "truth": float(truth),
            "variance": float(var), "z": float(z), "baseline": None if baseline is None else float(baseline)}


def full_matrix_baseline(panel, pattern, r, c_lambda=2.0, opts=None):
    """Nuclear-norm fit of the whole panel with one penalty.

    The penalty uses the pilot scale of the always-observed block and the
    full panel dimensions.
    """
    rows, cols = always_observed_block(pattern)
    sigma = estimate_sigma_initial(panel.values[np.ix_(rows, cols)], r)
    lam = select_lambda(sigma, *panel.shape, c_lambda)
    fit, _ = solve_nuclear(panel.values, panel.mask, lam, opts)
    return fit


def _staggered_target(cfg, rep):
    g = cfg.target_group
    start = sum(cfg.group_sizes[:g])
    if cfg.fix_target:
        return start
    return start + int(substream(cfg.seed, rep, 1).integers(cfg.group_sizes[g]))


def _staggered_rep(cfg, rep, with_baseline):
    panel, truth, pattern = gen_staggered(cfg, cfg.seed, rep)
    i = _staggered_target(cfg, rep)
    t = cfg.n_periods - 1
    opts = SolverOptions(lambda_constant=cfg.lambda_constant)
    res = infer_group_average(panel, pattern, [i], t, cfg.rank, opts)
    base = None
    if with_baseline:
        base = full_matrix_baseline(panel, pattern, cfg.rank, cfg.lambda_constant, opts)[i, t]
    return [_record(rep, "pipeline", res.estimate, truth[i, t], res.variance, base)]


def _interactive_rep(cfg, rep):
    sample = gen_interactive(cfg, cfg.seed, rep)
    asg = sample.panel.assignment
    d_last = max(asg.treatments)
    units = asg.groups[d_last]
    if cfg.fix_target:
        i = units[0]
    else:
        i = units[int(substream(cfg.seed, rep, 1).integers(len(units)))]
    t = cfg.n_periods - 1
    opts = SolverOptions(lambda_constant=cfg.lambda_constant)
    eff = estimate_effects(sample.panel, [i], cfg.rank, opts, periods=[t])
    m = sample.truth
    out = []
    for d in asg.treatments[1:]:
        out.append(_record(rep, f"mu{d}", eff.mu[(d, t)], m[d][i, t] - m[0][i, t], eff.var_mu[(d, t)]))
        if d > 1:
            out.append(_record(rep, f"theta{d}", eff.theta[(d, t)], m[d][i, t] - m[d - 1][i, t],
                               eff.var_theta[(d, t)]))
    return out


def _tobacco_rep(cfg, rep):
    base, truth = synthetic_tobacco_base(cfg.seed, rep, cfg.noise_sd)
    panel, truth, pattern, _ = gen_tobacco_protocol(base, cfg.seed, rep, truth)
    est = complete_panel(panel, cfg.rank, opts=SolverOptions(lambda_constant=cfg.lambda_constant))
    miss = ~panel.mask
    err = est.completed[miss] - truth[miss]
    return [_record(rep, "pipeline", float(np.mean(est.completed[miss])), float(np.mean(truth[miss])), 0.0,
                    None) | {"sq_error": float(np.mean(err * err))}]


def _run_one(args):
    cfg, rep, with_baseline = args
    try:
        if cfg.design == "staggered_basic":
            return rep, _staggered_rep(cfg, rep, with_baseline), None
        if cfg.design == "interactive_effects":
            return rep, _interactive_rep(cfg, rep), None
        return rep, _tobacco_rep(cfg, rep), None
    except (MNARError, np.linalg.LinAlgError, ValueError) as exc:
        return rep, [], f"{type(exc).__name__}: {exc}"


def _run(cfg, with_baseline, threads, reps=None):
    reps = range(cfg.replications) if reps is None else reps
    jobs = [(cfg, rep, with_baseline) for rep in reps]
    t0 = time.perf_counter()
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        results = [_run_one(j) for j in jobs]
    results.sort(key=lambda x: x[0])
    report = ExperimentReport(cfg.design, config=cfg.to_dict())
    for rep, recs, err in results:
        report.records.extend(recs)
        if err:
            report.failures.append({"rep": rep, "error": err})
    report.wall_time = time.perf_counter() - t0
    return report


def coverage_rates(records, levels):
    """Share of records whose Gaussian interval at each level covers the truth."""
    zs = np.array([r["z"] for r in records])
    zs = zs[np.isfinite(zs)]
    if zs.size == 0:
        return {lvl: math.nan for lvl in levels}
    return {lvl: float(np.mean(np.abs(zs) <= normal_quantile(0.5 + lvl / 2))) for lvl in levels}


def rmse_of(records, key="estimate"):
    errs = np.array([r[key] - r["truth"] for r in records if r.get(key) is not None])
    return float(np.sqrt(np.mean(errs ** 2))) if errs.size else math.nan


def run_experiment(cfg, levels=None, threads=1, baseline=None):
    """Run ``cfg.replications`` replications and summarize RMSE and coverage.

    RMSE is reported per target (and for the full-matrix baseline when it
    was run); coverage per target and level for designs with intervals.
    Failed replications are listed in ``failures`` and left out of the
    summaries.
    """
    levels = tuple(levels or cfg.levels)
    for lvl in levels:
        if not 0 < lvl < 1:
            raise ValueError("levels must lie in (0, 1)")
    if baseline is None:
        baseline = cfg.baseline
    report = _run(cfg, bool(baseline) and cfg.design == "staggered_basic", threads)
    targets = sorted({r["target"] for r in report.records})
    if cfg.design == "tobacco_protocol":
        report.rmse = {"pipeline": float(np.sqrt(np.mean([r["sq_error"] for r in report.records])))}
        return report
    for t in targets:
        recs = [r for r in report.records if r["target"] == t]
        report.rmse[t] = rmse_of(recs)
        if any(r["baseline"] is not None for r in recs):
            report.rmse["baseline"] = rmse_of(recs, "baseline")
        report.coverage[t] = coverage_rates(recs, levels)
    return report


def run_rmse_experiment(cfg, threads=1):
    """RMSE of the pipeline at the design's target (plus the full-matrix baseline)."""
    return run_experiment(cfg, threads=threads)


def run_coverage_experiment(cfg, levels=None, threads=1):
    """Empirical coverage of the Gaussian intervals at each level, per target."""
    if cfg.design == "tobacco_protocol":
        raise ValueError("the tobacco protocol design has no interval targets")
    return run_experiment(cfg, levels, threads, baseline=False)
