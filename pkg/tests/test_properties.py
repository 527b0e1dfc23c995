import io

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mnarmc.inference import group_average_ci
from mnarmc.panel import ObservedPanel, classify_pattern, load_panel, write_wide_csv
from mnarmc.subgroup import partition_missing

from patterns import check_partition, staggered_panels


@settings(max_examples=200, deadline=None)
@given(staggered_panels())
def test_plan_covers_each_missing_entry_once(case):
    panel, cap = case
    check_partition(panel, cap)


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 200), min_size=1, max_size=60), st.integers(1, 10))
def test_partition_missing_is_a_partition(targets, cap):
    plan = partition_missing(targets, cap)
    flat = [u for g in plan.groups for u in g]
    assert sorted(flat) == sorted(targets)
    assert all(1 <= len(g) <= cap for g in plan.groups)
    assert len(plan.groups) == -(-len(targets) // cap)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**16))
def test_wide_csv_round_trip(n, t, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((n, t)) * 10.0 ** rng.integers(-5, 5)
    mask = rng.random((n, t)) < 0.8
    mask[:, 0] = mask[0, :] = True
    panel = ObservedPanel(np.where(mask, vals, np.nan), mask)
    buf = io.StringIO()
    write_wide_csv(buf, panel.values, panel.unit_labels, panel.time_labels)
    back = load_panel(buf.getvalue())
    np.testing.assert_array_equal(back.mask, panel.mask)
    np.testing.assert_array_equal(back.values[back.mask], panel.values[panel.mask])


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e6), st.floats(0.01, 0.99))
def test_ci_symmetric_and_nested(est, var, level):
    lo, hi = group_average_ci(est, var, level)
    assert lo <= est <= hi
    assert abs((hi - est) - (est - lo)) <= 1e-9 * max(1.0, abs(est))
    lo2, hi2 = group_average_ci(est, var, min(0.995, level + 0.004))
    assert lo2 <= lo and hi <= hi2


@settings(max_examples=100, deadline=None)
@given(staggered_panels())
def test_classification_invariant_to_values(case):
    panel, _ = case
    shifted = ObservedPanel(np.where(panel.mask, panel.values * 3 + 1, np.nan), panel.mask)
    assert classify_pattern(shifted).kind == classify_pattern(panel).kind
