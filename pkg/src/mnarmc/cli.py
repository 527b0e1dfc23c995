"""Command-line interface: ``mnarmc complete|infer|treat|simulate``.

Exit codes: 0 success, 2 bad input or arguments, 3 unsupported missing
pattern, 4 numerical failure (e.g. rank collapse), 5 internal error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import MNARError, NumericalError, PanelError, UnsupportedPatternError
from .inference import infer_group_average
from .panel import TreatmentAssignment, classify_pattern, load_panel, write_wide_csv
from .pipeline import DEFAULT_R_MAX, choose_rank, complete_panel, resolve_threads
from .simlab import DESIGNS, SimConfig, run_experiment
from .solver import SolverOptions, estimate_rank
from .treatment import (
    TreatmentPanel,
    bonferroni_critical_value,
    estimate_effects,
    spec_test,
    twfe_theta,
    weekly_windows,
)

EXIT_OK, EXIT_INPUT, EXIT_PATTERN, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4, 5


# ------------------------------------------------------------- serializing

def _num(x):
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent=2, _level=0):
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out, args, inputs, started, seed=None):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {name: {"path": p, "sha256": _digest(p)} for name, p in inputs.items() if p},
        "started": started,
        "finished": _now(),
    }
    _write(os.path.join(out, "manifest.json"), dumps(manifest) + "\n")


# ------------------------------------------------------------------ parsing

def _rank_arg(text):
    if text == "auto":
        return text
    try:
        r = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("rank must be a positive integer or 'auto'") from None
    if r < 1:
        raise argparse.ArgumentTypeError("rank must be a positive integer or 'auto'")
    return r


def _level_arg(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid level {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("level must lie strictly between 0 and 1")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _window_arg(text):
    kind, _, k = text.partition(":")
    if kind != "weekly" or not k.isdigit() or int(k) < 1:
        raise argparse.ArgumentTypeError("window must look like weekly:K with K >= 1")
    return int(k)


def _solver_opts(args):
    return SolverOptions(max_iters=args.max_iters, rel_tol=args.rel_tol, lambda_constant=args.lambda_c)


def _add_common(p, rank_default="auto"):
    p.add_argument("--input", required=True, help="panel CSV")
    p.add_argument("--format", choices=("wide", "long"), default="wide", help="CSV layout")
    p.add_argument("--rank", type=_rank_arg, default=rank_default, help="rank r or 'auto' (eigenvalue ratio)")
    p.add_argument("--group-cap", type=_positive_int, default=None,
                   help="maximum group size (default floor(sqrt(min(N0, T0))))")
    p.add_argument("--lambda-c", type=float, default=2.0, help="penalty constant C in C*sigma*sqrt(max(n, m))")
    p.add_argument("--max-iters", type=_positive_int, default=500, help="solver iteration cap")
    p.add_argument("--rel-tol", type=float, default=1e-7, help="solver relative-change tolerance")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker cap (default: MNAR_THREADS or available cores)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mnarmc", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="fill missing entries of a panel", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fixed penalty for every submatrix (overrides --lambda-c)")
    p.add_argument("--truth", default=None, help="optional wide CSV with the true matrix; reports max abs error")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("infer", help="confidence interval for a group average at one period", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--group", required=True, help="comma-separated unit labels")
    p.add_argument("--period", required=True, help="target period label")
    p.add_argument("--level", type=_level_arg, default=0.95, help="confidence level")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed penalty for every submatrix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("treat", help="treatment effects and specification tests", formatter_class=fmt)
    _add_common(p)
    p.set_defaults(format="long")
    p.add_argument("--assignment", required=True, help="CSV with columns unit,treatment (0 = control)")
    p.add_argument("--pilot-start", required=True, help="label of the first pilot period")
    p.add_argument("--beta", default=None, help="JSON file with the covariate coefficients")
    p.add_argument("--covariates", default=None, help="long CSV unit,time,x1,...,xp")
    p.add_argument("--group", default=None, help="comma-separated unit labels to average over (default: all)")
    p.add_argument("--window", type=_window_arg, default=None, help="aggregation window, e.g. weekly:5")
    p.add_argument("--bonferroni", type=_positive_int, default=None,
                   help="number of periods for the uniform critical value (default: window or period count)")
    p.add_argument("--draws", type=_positive_int, default=1000, help="bootstrap draws")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--level", type=_level_arg, default=0.95, help="confidence level for reported intervals")
    p.set_defaults(func=cmd_treat)

    p = sub.add_parser("simulate", help="Monte-Carlo RMSE and coverage studies", formatter_class=fmt)
    p.add_argument("--design", choices=DESIGNS, default="staggered_basic", help="data-generating design")
    p.add_argument("--preset", choices=("paper", "ci"), default="ci", help="replication budget preset")
    p.add_argument("--reps", type=int, default=None, help="replications (overrides the preset)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default from the design)")
    p.add_argument("--config", default=None, help="JSON file with SimConfig fields")
    p.add_argument("--experiment", choices=("rmse", "coverage", "both"), default="both", help="what to run")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="parallel replications (default: MNAR_THREADS or available cores)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)
    return parser


# ----------------------------------------------------------------- commands

def _load(args):
    return load_panel(args.input, args.format)


def cmd_complete(args):
    started = _now()
    panel = _load(args)
    pattern = classify_pattern(panel)
    est = complete_panel(panel, args.rank, args.group_cap, _solver_opts(args), args.lam,
                         resolve_threads(args.threads))
    diag = est.to_dict()
    if args.truth:
        truth = load_panel(args.truth, "wide")
        if truth.shape != panel.shape:
            raise PanelError(f"truth shape {truth.shape} differs from input {panel.shape}")
        diag["max_abs_error"] = float(np.max(np.abs(est.completed - truth.values)))
        miss = ~panel.mask
        diag["max_abs_error_missing"] = float(np.max(np.abs(est.completed - truth.values)[miss])) if miss.any() else 0.0
    write_wide_csv(os.path.join(args.out, "completed.csv"), est.completed, panel.unit_labels, panel.time_labels)
    _write(os.path.join(args.out, "diagnostics.json"), dumps(diag) + "\n")
    write_manifest(args.out, args, {"input": args.input, "truth": args.truth}, started)
    print(f"completed {int((~panel.mask).sum())} missing entries with {est.n_subproblems} subproblems "
          f"({pattern.kind}, rank {est.rank})")


def _labels_to_units(panel, text):
    labels = [s.strip() for s in text.split(",") if s.strip()]
    if not labels:
        raise PanelError("empty --group")
    return [panel.unit_index(s) for s in labels]


def cmd_infer(args):
    started = _now()
    panel = _load(args)
    pattern = classify_pattern(panel)
    units = _labels_to_units(panel, args.group)
    t0 = panel.time_index(args.period)
    r = choose_rank(panel, pattern, args.rank)
    res = infer_group_average(panel, pattern, units, t0, r, _solver_opts(args), args.level, args.group_cap,
                              args.lam, resolve_threads(args.threads))
    out = res.to_dict() | {"rank": r, "group": [panel.unit_labels[i] for i in units], "period": args.period}
    _write(os.path.join(args.out, "inference.json"), dumps(out) + "\n")
    write_manifest(args.out, args, {"input": args.input}, started)
    print(f"estimate {res.estimate:.6g}, {args.level:.0%} CI [{res.ci_lower:.6g}, {res.ci_upper:.6g}]")


def _read_assignment(path, panel):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = [h.strip().lower() for h in rows[0]] if rows else []
    if "unit" not in header or "treatment" not in header:
        raise PanelError("assignment CSV needs columns unit,treatment")
    ku, kd = header.index("unit"), header.index("treatment")
    groups = {}
    for r in rows[1:]:
        try:
            d = int(r[kd])
        except ValueError:
            raise PanelError(f"treatment id {r[kd]!r} is not an integer") from None
        groups.setdefault(d, []).append(panel.unit_index(r[ku].strip()))
    return groups


def _read_covariates(path, panel, p):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["unit", "time"] or len(header) - 2 != p:
        raise PanelError(f"covariates CSV needs columns unit,time and {p} covariate columns")
    cov = np.full(panel.shape + (p,), np.nan)
    for r in rows[1:]:
        i, t = panel.unit_index(r[0].strip()), panel.time_index(r[1].strip())
        try:
            cov[i, t] = [float(x) for x in r[2:]]
        except ValueError:
            raise PanelError(f"non-numeric covariate for unit {r[0]!r}, time {r[1]!r}") from None
    if not np.all(np.isfinite(cov)):
        raise PanelError("covariates must cover every unit and period")
    return cov


def cmd_treat(args):
    started = _now()
    panel = _load(args)
    if not panel.mask.all():
        raise PanelError("treatment outcomes must be observed for every unit and period")
    groups = _read_assignment(args.assignment, panel)
    pilot = panel.time_index(args.pilot_start)
    asg = TreatmentAssignment(groups, pilot, panel.shape[0])
    beta = cov = None
    if (args.beta is None) != (args.covariates is None):
        raise PanelError("--beta and --covariates must be given together")
    if args.beta:
        with open(args.beta) as fh:
            try:
                beta = np.atleast_1d(np.asarray(json.load(fh), dtype=np.float64))
            except (ValueError, TypeError) as exc:
                raise PanelError(f"cannot read beta: {exc}") from None
        cov = _read_covariates(args.covariates, panel, beta.size)
    tp = TreatmentPanel(panel, asg, beta, cov)
    if args.rank == "auto":
        block = tp.adjusted_values()[:, :pilot]
        r = estimate_rank(block, min(DEFAULT_R_MAX, min(block.shape) - 1))
    else:
        r = args.rank
    group = _labels_to_units(panel, args.group) if args.group else list(range(panel.shape[0]))
    periods = tuple(range(pilot, panel.shape[1]))
    windows = weekly_windows(periods, args.window) if args.window else ()
    eff = estimate_effects(tp, group, r, _solver_opts(args), periods, args.group_cap, windows,
                           unit_level=True, threads=resolve_threads(args.threads))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d", "t", "mu", "theta", "var_mu", "var_theta"])
    for d, t, mu, th, vm, vt in eff.rows():
        w.writerow([d, panel.time_labels[t], _num(mu), _num(th), _num(vm), _num(vt)])
    _write(os.path.join(args.out, "effects.csv"), buf.getvalue())
    n_bonf = args.bonferroni or (len(windows) if windows else len(periods))
    if windows:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d", "window", "start", "end", "theta", "var_theta"])
        for (d, k), v in sorted(eff.window_theta.items()):
            win = windows[k]
            w.writerow([d, k, panel.time_labels[win[0]], panel.time_labels[win[-1]], _num(v),
                        _num(eff.window_var[(d, k)])])
        _write(os.path.join(args.out, "windows.csv"), buf.getvalue())

    levels = (0.90, 0.95, 0.99)
    tw = twfe_theta(tp)
    ms = spec_test(eff.unit_theta, eff.unit_var_theta, tw, args.draws, args.seed, levels)
    per_d = {}
    for d in sorted(eff.unit_theta):
        grand = float(np.mean(eff.unit_theta[d]))
        per_d[str(d)] = spec_test(eff.unit_theta[d], eff.unit_var_theta[d], grand, args.draws, args.seed,
                                  levels).to_dict() | {"baseline": grand}
    report = {
        "rank": r,
        "sigma_hat": math.sqrt(eff.sigma2),
        "uniform_critical_value": bonferroni_critical_value(n_bonf),
        "bonferroni_n": n_bonf,
        "model_specification": ms.to_dict() | {"baseline": {str(k): v for k, v in tw.items()}},
        "per_treatment": per_d,
    }
    _write(os.path.join(args.out, "spectest.json"), dumps(report) + "\n")
    write_manifest(args.out, args, {"input": args.input, "assignment": args.assignment, "beta": args.beta,
                                    "covariates": args.covariates}, started, seed=args.seed)
    print(f"estimated {len(eff.mu)} (treatment, period) effects; specification statistic {ms.statistic:.4g}")


def cmd_simulate(args):
    started = _now()
    if args.reps is not None and args.reps < 1:
        raise PanelError("--reps must be >= 1")
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            try:
                overrides = json.load(fh)
            except ValueError as exc:
                raise PanelError(f"cannot parse config: {exc}") from None
        overrides.pop("design", None)
    if args.reps is not None:
        overrides["replications"] = args.reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = SimConfig.preset(args.design, args.preset)
        if overrides:
            cfg = SimConfig.from_dict(cfg.to_dict() | overrides)
    except TypeError as exc:
        raise PanelError(f"bad config: {exc}") from None
    threads = resolve_threads(args.threads)
    rep = run_experiment(cfg, threads=threads, baseline=cfg.baseline and args.experiment != "coverage")
    summary = {"config": cfg.to_dict(), "rmse": rep.rmse, "failures": rep.failures}
    if rep.coverage and args.experiment != "rmse":
        summary["coverage"] = {t: {str(k): v for k, v in c.items()} for t, c in rep.coverage.items()}
    summary["replications"] = cfg.replications
    _write(os.path.join(args.out, "summary.json"), dumps(summary) + "\n")
    _write(os.path.join(args.out, "records.csv"), rep.to_csv())
    write_manifest(args.out, args, {"config": args.config}, started, seed=cfg.seed)
    print(dumps({k: v for k, v in summary.items() if k in ("rmse", "coverage")}))


# --------------------------------------------------------------------- main

def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
    except UnsupportedPatternError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PATTERN
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PanelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MNARError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
