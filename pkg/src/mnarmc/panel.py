"""Panel data model, CSV ingestion and missing-pattern classification.

All indices are 0-based. A unit that adopts treatment at column ``a`` is
observed on columns ``0..a-1`` and missing from ``a`` onward.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import PanelError

MISSING_TOKENS = frozenset({"", "na", "nan", "NA", "NaN", "NAN", "Na"})

FULLY_OBSERVED = "FullyObserved"
SINGLE_TREATED_PERIOD = "SingleTreatedPeriod"
SINGLE_TREATED_UNIT = "SingleTreatedUnit"
BLOCK = "Block"
STAGGERED = "Staggered"
IRREGULAR = "Irregular"

BLOCK_KINDS = (FULLY_OBSERVED, SINGLE_TREATED_PERIOD, SINGLE_TREATED_UNIT, BLOCK)


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ObservedPanel:
    """Outcome matrix with an observation mask.

    Parameters
    ----------
    values : array_like, shape (N, T)
        Outcomes, units in rows and periods in columns. Entries outside the
        mask are stored as NaN.
    mask : array_like of bool, optional
        True where the entry is observed. Defaults to ``isfinite(values)``.
    unit_labels, time_labels : sequence of str, optional
        Defaults to ``"0", "1", ...``.
    """

    values: np.ndarray
    mask: np.ndarray = None
    unit_labels: tuple = None
    time_labels: tuple = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise PanelError(f"values must be 2-D, got shape {values.shape}")
        mask = np.isfinite(values) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise PanelError(f"mask shape {mask.shape} does not match values {values.shape}")
        n, t = values.shape
        if n < 2 or t < 2:
            raise PanelError(f"panel must be at least 2x2, got {n}x{t}")
        if not np.all(np.isfinite(values[mask])):
            i, j = np.argwhere(mask & ~np.isfinite(values))[0]
            raise PanelError(f"observed entry ({i}, {j}) is not finite")
        units = tuple(str(u) for u in (self.unit_labels if self.unit_labels is not None else range(n)))
        times = tuple(str(s) for s in (self.time_labels if self.time_labels is not None else range(t)))
        if len(units) != n or len(times) != t:
            raise PanelError("label counts do not match the panel shape")
        if len(set(units)) != n or len(set(times)) != t:
            raise PanelError("unit and time labels must be unique")
        empty_rows = np.flatnonzero(~mask.any(axis=1))
        if empty_rows.size:
            raise PanelError(f"unit {units[empty_rows[0]]!r} has no observed entries")
        empty_cols = np.flatnonzero(~mask.any(axis=0))
        if empty_cols.size:
            raise PanelError(f"period {times[empty_cols[0]]!r} has no observed entries")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "unit_labels", units)
        object.__setattr__(self, "time_labels", times)

    @property
    def shape(self):
        return self.values.shape

    def filled(self, fill=0.0):
        """Values with missing entries replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)

    def unit_index(self, label):
        try:
            return self.unit_labels.index(str(label))
        except ValueError:
            raise PanelError(f"unknown unit {label!r}") from None

    def time_index(self, label):
        try:
            return self.time_labels.index(str(label))
        except ValueError:
            raise PanelError(f"unknown period {label!r}") from None

    def equals(self, other):
        return (
            self.unit_labels == other.unit_labels
            and self.time_labels == other.time_labels
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.filled(), other.filled())
        )


@dataclass(frozen=True)
class MissingPattern:
    """Structural description of an observation mask.

    For the block family, ``row_order``/``col_order`` list the always-observed
    units/periods first; ``n0``/``t0`` count them. For staggered adoption,
    ``adoption_times[k]`` is the first missing column of every unit in
    ``adoption_groups[k]``.
    """

    kind: str
    shape: tuple
    n0: int = 0
    t0: int = 0
    row_order: tuple = ()
    col_order: tuple = ()
    adoption_times: tuple = ()
    adoption_groups: tuple = ()

    @property
    def is_block(self):
        return self.kind in BLOCK_KINDS

    @property
    def control_units(self):
        if self.is_block:
            return self.row_order[: self.n0]
        treated = {i for g in self.adoption_groups for i in g}
        return tuple(i for i in range(self.shape[0]) if i not in treated)

    @property
    def treated_units(self):
        if self.is_block:
            return self.row_order[self.n0:]
        return tuple(sorted(i for g in self.adoption_groups for i in g))

    @property
    def pre_periods(self):
        if self.is_block:
            return self.col_order[: self.t0]
        return tuple(range(self.adoption_times[0])) if self.adoption_times else tuple(range(self.shape[1]))

    @property
    def treated_periods(self):
        if self.is_block:
            return self.col_order[self.t0:]
        return tuple(range(self.adoption_times[0], self.shape[1])) if self.adoption_times else ()

    def adoption_of(self, unit):
        """First missing column of ``unit`` (``shape[1]`` if never missing)."""
        n, t = self.shape
        if self.is_block:
            if unit in set(self.row_order[: self.n0]):
                return t
            raise ValueError("adoption times are only defined for staggered patterns")
        for a, g in zip(self.adoption_times, self.adoption_groups):
            if unit in g:
                return a
        return t

    def to_mask(self):
        """Regenerate the observation mask from the pattern parameters."""
        n, t = self.shape
        if self.kind == IRREGULAR:
            raise ValueError("an irregular pattern carries no generating parameters")
        if self.is_block:
            mask = np.zeros((n, t), dtype=bool)
            mask[list(self.row_order[: self.n0]), :] = True
            mask[:, list(self.col_order[: self.t0])] = True
            return mask
        mask = np.ones((n, t), dtype=bool)
        for a, g in zip(self.adoption_times, self.adoption_groups):
            mask[np.ix_(list(g), range(a, t))] = False
        return mask

    def to_dict(self):
        return {
            "kind": self.kind,
            "shape": list(self.shape),
            "n0": self.n0,
            "t0": self.t0,
            "adoption_times": list(self.adoption_times),
            "adoption_groups": [list(g) for g in self.adoption_groups],
        }


@dataclass(frozen=True)
class TreatmentAssignment:
    """Map from treatment id to unit indices; ``0`` is the control group.

    ``pilot_start`` is the first pilot column, so pre-pilot periods are
    ``0..pilot_start-1``.
    """

    groups: Mapping
    pilot_start: int
    n_units: int = field(default=None)

    def __post_init__(self):
        groups = {int(d): tuple(sorted(int(i) for i in g)) for d, g in dict(self.groups).items()}
        if 0 not in groups or not groups[0]:
            raise PanelError("the control group (treatment 0) must be nonempty")
        seen = {}
        for d, g in groups.items():
            if d < 0:
                raise PanelError(f"treatment ids must be nonnegative, got {d}")
            for i in g:
                if i in seen:
                    raise PanelError(f"unit {i} assigned to treatments {seen[i]} and {d}")
                seen[i] = d
        n = self.n_units if self.n_units is not None else len(seen)
        if sorted(seen) != list(range(n)):
            raise PanelError("treatment groups must cover every unit exactly once")
        if self.pilot_start < 1:
            raise PanelError("at least one pre-pilot period is required")
        object.__setattr__(self, "groups", dict(sorted(groups.items())))
        object.__setattr__(self, "n_units", n)

    @property
    def treatments(self):
        return tuple(self.groups)

    @property
    def treated_units(self):
        return tuple(sorted(i for d, g in self.groups.items() if d != 0 for i in g))

    def treatment_of(self, unit):
        for d, g in self.groups.items():
            if unit in g:
                return d
        raise PanelError(f"unit {unit} has no treatment")


# ---------------------------------------------------------------- ingestion

def _open_text(source):
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, newline="") as fh:
            return fh.read()
    if isinstance(source, str):
        return source
    return source.read()


def _parse_cell(text, where):
    text = text.strip()
    if text in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise PanelError(f"non-numeric value {text!r} at {where}") from None


def _sort_times(labels):
    try:
        return sorted(labels, key=float)
    except ValueError:
        return list(labels)


def load_panel(source, format="wide", *, labeled=True, units=None, times=None):
    """Read a panel from CSV text.

    Parameters
    ----------
    source : path, str or text stream
        CSV content. A ``str`` containing a newline is taken as the content
        itself, otherwise as a path.
    format : {"wide", "long"}
        ``wide``: one row per unit, one column per period; with
        ``labeled=True`` the header row holds time labels and the first
        column unit labels. Empty cells, ``NA`` and ``NaN`` mean missing.
        ``long``: header ``unit,time,value``; an absent triple is missing.
    units, times : sequence of str, optional
        Declared labels for long format. Units default to order of first
        appearance; times are sorted numerically when they all parse as
        numbers, otherwise kept in order of first appearance.
    """
    text = _open_text(source)
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise PanelError("empty input")
    if format == "wide":
        return _load_wide(rows, labeled)
    if format == "long":
        return _load_long(rows, units, times)
    raise PanelError(f"unknown format {format!r}")


def _load_wide(rows, labeled):
    if labeled:
        header, body = rows[0], rows[1:]
        time_labels = [h.strip() for h in header[1:]]
        unit_labels = [r[0].strip() for r in body]
        cells = [r[1:] for r in body]
    else:
        cells = rows
        width = max(len(r) for r in rows)
        time_labels = [str(j) for j in range(width)]
        unit_labels = [str(i) for i in range(len(rows))]
    t = len(time_labels)
    values = np.full((len(cells), t), np.nan)
    for i, r in enumerate(cells):
        if len(r) > t:
            raise PanelError(f"row {unit_labels[i]!r} has {len(r)} cells, expected {t}")
        for j, c in enumerate(r):
            values[i, j] = _parse_cell(c, f"unit {unit_labels[i]!r}, period {time_labels[j]!r}")
    return ObservedPanel(values, np.isfinite(values), unit_labels, time_labels)


def _load_long(rows, units, times):
    header = [h.strip().lower() for h in rows[0]]
    try:
        ku, kt, kv = header.index("unit"), header.index("time"), header.index("value")
    except ValueError:
        raise PanelError("long format needs a header with columns unit,time,value") from None
    triples = {}
    seen_units, seen_times = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        u, s = r[ku].strip(), r[kt].strip()
        if (u, s) in triples:
            raise PanelError(f"duplicate entry for unit {u!r}, time {s!r} (line {lineno})")
        triples[(u, s)] = _parse_cell(r[kv], f"line {lineno}")
        if u not in seen_units:
            seen_units.append(u)
        if s not in seen_times:
            seen_times.append(s)
    unit_labels = [str(u) for u in units] if units is not None else seen_units
    time_labels = [str(s) for s in times] if times is not None else _sort_times(seen_times)
    extra = set(seen_units) - set(unit_labels) or set(seen_times) - set(time_labels)
    if extra:
        raise PanelError(f"labels {sorted(extra)} are not among the declared labels")
    ui = {u: i for i, u in enumerate(unit_labels)}
    ti = {s: j for j, s in enumerate(time_labels)}
    values = np.full((len(unit_labels), len(time_labels)), np.nan)
    for (u, s), v in triples.items():
        values[ui[u], ti[s]] = v
    return ObservedPanel(values, np.isfinite(values), unit_labels, time_labels)


def write_wide_csv(path_or_stream, matrix, unit_labels, time_labels, unit_header="unit"):
    """Write a matrix as wide CSV with 17 significant digits."""
    own = isinstance(path_or_stream, (str, os.PathLike))
    fh = open(path_or_stream, "w", newline="") if own else path_or_stream
    try:
        w = csv.writer(fh)
        w.writerow([unit_header, *time_labels])
        for u, row in zip(unit_labels, np.asarray(matrix)):
            w.writerow([u, *("" if not np.isfinite(x) else format(float(x), ".17g") for x in row)])
    finally:
        if own:
            fh.close()


# ----------------------------------------------------------- classification

def classify_pattern(panel):
    """Return the most specific :class:`MissingPattern` reproducing the mask.

    Block detection ignores row and column order; staggered adoption needs
    every unit to be observed on a prefix of periods.
    """
    mask = panel.mask if isinstance(panel, ObservedPanel) else np.asarray(panel, dtype=bool)
    n, t = mask.shape
    if mask.all():
        return MissingPattern(FULLY_OBSERVED, (n, t), n0=n, t0=t,
                              row_order=tuple(range(n)), col_order=tuple(range(t)))
    full_rows = mask.all(axis=1)
    full_cols = mask.all(axis=0)
    if np.array_equal(mask, full_rows[:, None] | full_cols[None, :]):
        row_order = tuple(np.flatnonzero(full_rows)) + tuple(np.flatnonzero(~full_rows))
        col_order = tuple(np.flatnonzero(full_cols)) + tuple(np.flatnonzero(~full_cols))
        n0, t0 = int(full_rows.sum()), int(full_cols.sum())
        if t0 == t - 1:
            kind = SINGLE_TREATED_PERIOD
        elif n0 == n - 1:
            kind = SINGLE_TREATED_UNIT
        else:
            kind = BLOCK
        return MissingPattern(kind, (n, t), n0=n0, t0=t0,
                              row_order=tuple(int(i) for i in row_order),
                              col_order=tuple(int(j) for j in col_order))
    adoption = _monotone_adoption(mask)
    if adoption is not None:
        times = sorted({int(a) for a in adoption if a < t})
        groups = tuple(tuple(int(i) for i in np.flatnonzero(adoption == a)) for a in times)
        return MissingPattern(STAGGERED, (n, t), adoption_times=tuple(times), adoption_groups=groups)
    return MissingPattern(IRREGULAR, (n, t))


def _monotone_adoption(mask):
    n, t = mask.shape
    counts = mask.sum(axis=1)
    prefix = np.arange(t)[None, :] < counts[:, None]
    if not np.array_equal(mask, prefix):
        return None
    return counts


def first_offending_cell(mask):
    """First observed cell (row-major) that follows a missing cell in its row."""
    mask = np.asarray(mask, dtype=bool)
    seen_missing = np.logical_or.accumulate(~mask, axis=1)
    bad = mask & np.concatenate([np.zeros((mask.shape[0], 1), bool), seen_missing[:, :-1]], axis=1)
    hits = np.argwhere(bad)
    return tuple(int(x) for x in hits[0]) if hits.size else None


def units_by_signature(mask, units: Iterable[int]):
    """Group ``units`` by their observed-column set, ascending by first unit."""
    out = {}
    for i in units:
        out.setdefault(mask[i].tobytes(), []).append(int(i))
    return [tuple(g) for g in sorted(out.values(), key=lambda g: g[0])]
