"""Split missing entries into small groups and build one submatrix per group.

Every submatrix pairs a fully observed reference block with a small set of
target entries, so that each nuclear-norm fit only has to fill a handful of
cells. :func:`completion_plan` covers every missing entry of a panel exactly
once; :func:`assemble_inference` builds the submatrices used for a group
average at one period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PanelError, UnsupportedPatternError
from .panel import (
    BLOCK_KINDS,
    FULLY_OBSERVED,
    IRREGULAR,
    STAGGERED,
    MissingPattern,
    ObservedPanel,
    classify_pattern,
    first_offending_cell,
)


@dataclass(frozen=True)
class GroupingPlan:
    groups: tuple
    cap: int

    def __post_init__(self):
        flat = [x for g in self.groups for x in g]
        if len(flat) != len(set(flat)):
            raise ValueError("groups overlap")
        if any(len(g) > self.cap or not g for g in self.groups):
            raise ValueError(f"group sizes must lie in [1, {self.cap}]")

    @property
    def sizes(self):
        return tuple(len(g) for g in self.groups)

    def __len__(self):
        return len(self.groups)


@dataclass(frozen=True, eq=False)
class SubProblem:
    """A submatrix of the parent panel with index maps back to it.

    ``target`` lists sub-indices ``(row, col)`` to estimate. They are
    exactly the masked-out entries, except for the fully observed
    submatrix built for already-observed units (``target_observed``).
    """

    values: np.ndarray
    mask: np.ndarray
    row_map: tuple
    col_map: tuple
    target: tuple
    parent_shape: tuple
    lam: float = None
    target_observed: bool = False
    n_reference: int = 0
    label: str = field(default="", compare=False)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def target_rows(self):
        return tuple(sorted({i for i, _ in self.target}))

    @property
    def target_cols(self):
        return tuple(sorted({j for _, j in self.target}))

    @property
    def reference_rows(self):
        return tuple(range(self.n_reference))

    def to_parent(self, i, j):
        return self.row_map[i], self.col_map[j]

    def from_parent(self, i, j):
        return self.row_map.index(i), self.col_map.index(j)

    def parent_targets(self):
        return tuple(self.to_parent(i, j) for i, j in self.target)

    def with_lambda(self, lam):
        return SubProblem(self.values, self.mask, self.row_map, self.col_map, self.target,
                          self.parent_shape, float(lam), self.target_observed, self.n_reference, self.label)


def default_group_cap(n0, t0):
    """``max(1, floor(sqrt(min(n0, t0))))``."""
    return max(1, math.isqrt(max(1, min(int(n0), int(t0)))))


def partition_missing(targets, cap):
    """Chunk ``targets`` (sorted ascending) into consecutive groups of ``cap``."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    items = sorted(targets)
    if not items:
        raise ValueError("no targets to partition")
    groups = tuple(tuple(items[k:k + cap]) for k in range(0, len(items), cap))
    return GroupingPlan(groups, int(cap))


def _build(panel, rows, cols, target_rows, target_cols, n_reference, label, observed_target=False):
    rows = tuple(int(i) for i in rows)
    cols = tuple(int(j) for j in cols)
    if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
        raise ValueError("row and column maps must be injective")
    idx = np.ix_(rows, cols)
    values = panel.values[idx]
    mask = panel.mask[idx].copy()
    rpos = {r: k for k, r in enumerate(rows)}
    cpos = {c: k for k, c in enumerate(cols)}
    target = tuple((rpos[i], cpos[j]) for i in target_rows for j in target_cols)
    expected = np.ones_like(mask)
    if not observed_target:
        for i, j in target:
            expected[i, j] = False
    if not np.array_equal(mask, expected):
        bad = np.argwhere(mask != expected)[0]
        i, j = rows[bad[0]], cols[bad[1]]
        raise UnsupportedPatternError(
            f"submatrix for {label or 'group'} is not block-missing at unit "
            f"{panel.unit_labels[i]!r}, period {panel.time_labels[j]!r}"
        )
    values = np.where(mask, values, np.nan)
    values.flags.writeable = False
    mask.flags.writeable = False
    return SubProblem(values, mask, rows, cols, target, panel.shape,
                      target_observed=observed_target, n_reference=n_reference, label=label)


def _require_block(pattern):
    if not pattern.is_block:
        raise UnsupportedPatternError(f"expected a block pattern, got {pattern.kind}")


def _check_group(group, allowed, what):
    group = tuple(sorted(int(i) for i in group))
    if not group:
        raise ValueError("empty group")
    bad = [i for i in group if i not in set(allowed)]
    if bad:
        raise ValueError(f"units {bad} are not {what}")
    return group


def assemble_single_period(panel, pattern, group):
    """Submatrix for a single treated period: controls + ``group``, all periods."""
    _require_block(pattern)
    if pattern.t0 != pattern.shape[1] - 1:
        raise UnsupportedPatternError("single-period assembly needs exactly one treated period")
    return assemble_block(panel, pattern, group, pattern.col_order[-1])


def assemble_block(panel, pattern, group, t):
    """Controls + ``group`` on the pre-periods plus treated period ``t``."""
    _require_block(pattern)
    group = _check_group(group, pattern.treated_units, "treated")
    if t not in set(pattern.treated_periods):
        raise ValueError(f"period {t} is not a treated period")
    rows = pattern.control_units + group
    cols = pattern.pre_periods + (t,)
    return _build(panel, rows, cols, group, (t,), pattern.n0, f"block t={t}")


def assemble_block_by_unit(panel, pattern, unit, periods):
    """Transposed block assembly: one treated unit and a group of periods."""
    _require_block(pattern)
    periods = _check_group(periods, pattern.treated_periods, "treated periods")
    if unit not in set(pattern.treated_units):
        raise ValueError(f"unit {unit} is not treated")
    rows = pattern.control_units + (int(unit),)
    cols = pattern.pre_periods + periods
    return _build(panel, rows, cols, (int(unit),), periods, pattern.n0, f"block unit={unit}")


def _band(pattern, d_prime):
    times = pattern.adoption_times + (pattern.shape[1],)
    return times[d_prime], times[d_prime + 1]


def untreated_before(pattern, t):
    """Units whose adoption time is at least ``t`` (never-treated included)."""
    n = pattern.shape[0]
    treated = {}
    for a, g in zip(pattern.adoption_times, pattern.adoption_groups):
        for i in g:
            treated[i] = a
    return tuple(i for i in range(n) if treated.get(i, pattern.shape[1]) >= t)


def assemble_staggered(panel, pattern, d, d_prime, group, period=None):
    """Submatrix for adopters ``G_d`` on the band ``[T_{d'}, T_{d'+1})``.

    Rows are the units untreated before ``T_{d'+1}`` followed by ``group``;
    columns are ``[0, T_d)`` plus the band (or only ``period`` from it).
    ``d`` and ``d_prime`` index ``pattern.adoption_times`` from 0.
    """
    if pattern.kind != STAGGERED:
        raise UnsupportedPatternError(f"expected a staggered pattern, got {pattern.kind}")
    D = len(pattern.adoption_times)
    if not 0 <= d <= d_prime < D:
        raise ValueError(f"need 0 <= d <= d_prime < {D}")
    group = _check_group(group, pattern.adoption_groups[d], f"in adoption group {d}")
    lo, hi = _band(pattern, d_prime)
    ref = untreated_before(pattern, hi)
    if not ref:
        raise UnsupportedPatternError(f"no units remain untreated through column {hi - 1}")
    if period is None:
        band = tuple(range(lo, hi))
    else:
        if not lo <= period < hi:
            raise ValueError(f"period {period} outside band [{lo}, {hi})")
        band = (int(period),)
    cols = tuple(range(pattern.adoption_times[d])) + band
    return _build(panel, ref + group, cols, group, band, len(ref), f"staggered d={d} d'={d_prime}")


# ------------------------------------------------------------ inference plan

def reference_units(panel, pattern, t0):
    """Units observed at ``t0`` that serve as the always-observed block."""
    n = panel.shape[0]
    if pattern.kind == FULLY_OBSERVED:
        return tuple(range(n))
    if pattern.is_block:
        if t0 in set(pattern.pre_periods):
            return tuple(range(n))
        return pattern.control_units
    if pattern.kind == STAGGERED:
        return untreated_before(pattern, t0 + 1)
    raise UnsupportedPatternError(_irregular_message(panel))


def reference_periods(panel, pattern, t0):
    """Columns paired with ``t0`` in the fully observed reference submatrix."""
    t = panel.shape[1]
    if pattern.kind == FULLY_OBSERVED:
        cols = range(t)
    elif pattern.is_block:
        cols = pattern.pre_periods
    elif pattern.kind == STAGGERED:
        ref = reference_units(panel, pattern, t0)
        end = min((pattern.adoption_of(i) for i in ref), default=t)
        cols = range(end)
    else:
        raise UnsupportedPatternError(_irregular_message(panel))
    return tuple(j for j in cols if j != t0)


def split_inference_group(panel, pattern, group, t0, cap=None):
    """Split ``group`` into the already-observed part and capped adoption classes.

    Returns ``(g0, plan)`` where ``g0`` holds units observed at ``t0`` and
    ``plan`` groups the rest so that units within a group share their
    observed periods.
    """
    group = tuple(sorted(set(int(i) for i in group)))
    if not group:
        raise ValueError("empty group")
    ref = set(reference_units(panel, pattern, t0))
    g0 = tuple(i for i in group if i in ref)
    rest = [i for i in group if i not in ref]
    if not rest:
        return g0, GroupingPlan((), cap or 1)
    classes = {}
    for i in rest:
        if panel.mask[i, t0]:
            raise UnsupportedPatternError(f"unit {panel.unit_labels[i]!r} is observed at the target period "
                                          "but not part of the reference block")
        classes.setdefault(panel.mask[i].tobytes(), []).append(i)
    if cap is None:
        cols = min(int(panel.mask[c[0]].sum()) for c in classes.values())
        cap = default_group_cap(len(ref), cols)
    groups = []
    for members in sorted(classes.values(), key=lambda c: c[0]):
        groups.extend(partition_missing(members, cap).groups)
    return g0, GroupingPlan(tuple(groups), int(cap))


def assemble_inference(panel, pattern, group, t0):
    """Submatrix for a group average at period ``t0``.

    Units observed at ``t0`` get the fully observed reference submatrix with
    ``target_observed`` set. Otherwise all units must share one adoption
    time; rows are the reference units plus ``group`` and columns are the
    group's observed periods plus ``t0``.
    """
    if pattern.kind == IRREGULAR:
        raise UnsupportedPatternError(_irregular_message(panel))
    group = tuple(sorted(set(int(i) for i in group)))
    if not group:
        raise ValueError("empty group")
    ref = reference_units(panel, pattern, t0)
    refset = set(ref)
    if all(i in refset for i in group):
        cols = reference_periods(panel, pattern, t0) + (int(t0),)
        return _build(panel, ref, cols, group, (t0,), len(ref), f"observed t={t0}", observed_target=True)
    if any(i in refset for i in group):
        raise ValueError("group mixes observed and missing units at the target period")
    sig = {panel.mask[i].tobytes() for i in group}
    if len(sig) > 1:
        raise ValueError("units in one inference group must share their adoption time")
    if panel.mask[group[0], t0]:
        raise UnsupportedPatternError("target period is observed for a unit outside the reference block")
    cols = tuple(int(j) for j in np.flatnonzero(panel.mask[group[0]])) + (int(t0),)
    return _build(panel, ref + group, cols, group, (t0,), len(ref), f"inference t={t0}")


# --------------------------------------------------------- completion plan

def _irregular_message(panel):
    cell = first_offending_cell(panel.mask)
    if cell is None:
        return "missing pattern is neither block nor staggered adoption"
    i, j = cell
    return (f"unsupported (irregular) missing pattern: unit {panel.unit_labels[i]!r} is observed at "
            f"period {panel.time_labels[j]!r} after a missing period")


def completion_plan(panel, pattern=None, cap=None):
    """Submatrices that together cover every missing entry exactly once.

    Block patterns are handled one treated period at a time (or one treated
    unit at a time, whichever needs fewer submatrices); staggered patterns
    per adopter group, band and period.
    """
    pattern = pattern or classify_pattern(panel)
    if pattern.kind == FULLY_OBSERVED:
        return []
    if pattern.kind == IRREGULAR:
        raise UnsupportedPatternError(_irregular_message(panel))
    subs = []
    if pattern.is_block:
        c = cap or default_group_cap(pattern.n0, pattern.t0)
        units, periods = pattern.treated_units, pattern.treated_periods
        by_period = math.ceil(len(units) / c) * len(periods)
        by_unit = math.ceil(len(periods) / c) * len(units)
        if by_period <= by_unit:
            plan = partition_missing(units, c)
            for t in periods:
                subs.extend(assemble_block(panel, pattern, g, t) for g in plan.groups)
        else:
            plan = partition_missing(periods, c)
            for i in units:
                subs.extend(assemble_block_by_unit(panel, pattern, i, g) for g in plan.groups)
        return subs
    D = len(pattern.adoption_times)
    for d in range(D):
        for dp in range(d, D):
            lo, hi = _band(pattern, dp)
            n_ref = len(untreated_before(pattern, hi))
            c = cap or default_group_cap(n_ref, pattern.adoption_times[d])
            plan = partition_missing(pattern.adoption_groups[d], c)
            for t in range(lo, hi):
                subs.extend(assemble_staggered(panel, pattern, d, dp, g, period=t) for g in plan.groups)
    return subs


# -------------------------------------------------------------- reassembly

@dataclass(frozen=True, eq=False)
class Completion:
    completed: np.ndarray
    fitted: np.ndarray
    counts: np.ndarray


class Reassembler:
    """Accumulate submatrix estimates into parent coordinates.

    Entries estimated by several submatrices are averaged; every missing
    entry must be a target of exactly one submatrix.
    """

    def __init__(self, shape):
        self.shape = tuple(shape)
        self._sum = np.zeros(self.shape)
        self._count = np.zeros(self.shape, dtype=np.int64)
        self._targets = np.zeros(self.shape, dtype=np.int64)

    def add(self, sub, estimate):
        estimate = np.asarray(estimate, dtype=np.float64)
        if estimate.shape != sub.shape:
            raise ValueError("estimate shape does not match its submatrix")
        if tuple(sub.parent_shape) != self.shape:
            raise ValueError("submatrix belongs to a different parent")
        idx = np.ix_(sub.row_map, sub.col_map)
        self._sum[idx] += estimate
        self._count[idx] += 1
        if not sub.target_observed:
            for i, j in sub.parent_targets():
                self._targets[i, j] += 1

    def result(self, panel):
        missing = ~panel.mask
        covered = self._targets[missing]
        if np.any(covered == 0):
            i, j = np.argwhere(missing & (self._targets == 0))[0]
            raise ValueError(f"missing entry ({i}, {j}) is not covered by any submatrix")
        if np.any(covered > 1):
            i, j = np.argwhere(missing & (self._targets > 1))[0]
            raise ValueError(f"missing entry ({i}, {j}) is covered {self._targets[i, j]} times")
        with np.errstate(invalid="ignore", divide="ignore"):
            fitted = np.where(self._count > 0, self._sum / np.maximum(self._count, 1), np.nan)
        completed = np.where(panel.mask, panel.values, fitted)
        return Completion(completed, fitted, self._count.copy())


def reassemble(sub_estimates, panel):
    """Combine ``(SubProblem, estimate)`` pairs into a completed panel.

    Returns a :class:`Completion` whose ``completed`` keeps observed values
    and fills missing entries, and whose ``fitted`` holds the per-entry mean
    of all submatrix estimates (NaN where nothing was estimated).
    """
    acc = Reassembler(panel.shape)
    for sub, est in sub_estimates:
        acc.add(sub, est)
    return acc.result(panel)
