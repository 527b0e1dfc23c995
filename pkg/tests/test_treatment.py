import numpy as np
import pytest

from mnarmc.errors import PanelError
from mnarmc.inference import GroupFactors, build_influence, mean_influence
from mnarmc.panel import ObservedPanel, TreatmentAssignment
from mnarmc.solver import SolverOptions
from mnarmc.treatment import (
    TreatmentPanel,
    aggregate_window_variance,
    bonferroni_critical_value,
    bootstrap_max_abs,
    build_treatment_panel,
    contrast_variance_expanded,
    effect_variance,
    estimate_effects,
    estimate_unit_effects,
    spec_test,
    twfe_effects,
    weekly_windows,
)
from scipy.special import ndtri


def six_unit_assignment():
    return TreatmentAssignment({0: [0, 3], 1: [1, 2], 2: [4, 5]}, pilot_start=3)


def test_build_treatment_panel_mask():
    base = ObservedPanel(np.arange(30.0).reshape(6, 5))
    panel, pattern = build_treatment_panel(base, six_unit_assignment(), 1)
    expect = np.zeros((6, 5), bool)
    expect[:, :3] = True
    expect[[1, 2], 3:] = True
    np.testing.assert_array_equal(panel.mask, expect)
    assert pattern.kind == "Block" and pattern.n0 == 2
    with pytest.raises(PanelError, match="unknown treatment"):
        build_treatment_panel(base, six_unit_assignment(), 7)


def test_build_treatment_panel_all_units_and_covariates():
    base = ObservedPanel(np.arange(12.0).reshape(3, 4))
    asg = TreatmentAssignment({0: [0, 1, 2]}, pilot_start=2)
    panel, pattern = build_treatment_panel(base, asg, 0)
    assert pattern.kind == "FullyObserved"
    panel, _ = build_treatment_panel(base, asg, 0, beta=[1.0], covariates=np.ones((3, 4, 1)))
    np.testing.assert_array_equal(panel.values, base.values - 1.0)


def factors(rng, n_ref=6, size=3, t0=7, r=2, units=(10, 11, 12)):
    return GroupFactors(rng.standard_normal((n_ref, r)), rng.standard_normal((size, r)),
                        rng.standard_normal((t0, r)), rng.standard_normal(r),
                        tuple(range(n_ref)), tuple(units), tuple(range(t0)))


def test_expanded_form_matches_difference_form(rng):
    for _ in range(10):
        fd, fp = factors(rng), factors(rng)
        est = {u: 0.0 for u in fd.units}
        diff = effect_variance(build_influence([fd], est, (13, 9), key=1),
                               build_influence([fp], est, (13, 9), key=0), 1.7)
        assert diff == pytest.approx(contrast_variance_expanded(fd, fp, 1.7), rel=1e-10)


def test_identical_columns_cancel_and_rows_add():
    ones = GroupFactors(np.ones((4, 1)), np.ones((2, 1)), np.ones((5, 1)), np.ones(1),
                        (0, 1, 2, 3), (6, 7), tuple(range(5)))
    est = {6: 0.0, 7: 0.0}
    a = build_influence([ones], est, (8, 6), key=1)
    b = build_influence([ones], est, (8, 6), key=0)
    assert effect_variance(a, b, 1.0) == pytest.approx(0.5, abs=1e-14)
    assert contrast_variance_expanded(ones, ones, 1.0) == pytest.approx(0.5, abs=1e-14)
    assert effect_variance(a, b, 4.0) == pytest.approx(2.0, abs=1e-14)
    # same noise source on both sides cancels entirely
    assert effect_variance(a, a, 1.0) == 0.0


def test_window_variance(rng):
    fd, fp = factors(rng), factors(rng)
    est = {u: 0.0 for u in fd.units}
    a1 = build_influence([fd], est, (13, 9), key=(1, 7))
    b1 = build_influence([fp], est, (13, 9), key=(0, 7))
    assert aggregate_window_variance([a1], [b1], 1.0) == pytest.approx(effect_variance(a1, b1, 1.0), rel=1e-14)
    a2 = build_influence([fd], est, (13, 9), key=(1, 8))
    b2 = build_influence([fp], est, (13, 9), key=(0, 8))
    one_row, one_col = (a1 - b1).components(1.0)
    two_row, two_col = mean_influence([a1 - b1, a2 - b2]).components(1.0)
    assert two_row == pytest.approx(one_row / 2, rel=1e-12)
    assert two_col == pytest.approx(one_col, rel=1e-12)
    with pytest.raises(ValueError):
        aggregate_window_variance([], [], 1.0)


def test_bonferroni_and_windows():
    # Phi^{-1}(1 - 0.025/252)
    assert bonferroni_critical_value(252) == pytest.approx(3.72103, abs=1e-3)
    assert bonferroni_critical_value(1) == pytest.approx(1.95996, abs=1e-4)
    assert weekly_windows(range(7), 3) == ((0, 1, 2), (3, 4, 5), (6,))
    with pytest.raises(ValueError):
        weekly_windows(range(4), 0)


def test_unit_effect_means():
    assert estimate_unit_effects(np.full((3, 4), 2.5)).tolist() == [2.5] * 3
    assert estimate_unit_effects([[1.0, 3.0]]).tolist() == [2.0]
    fixture = np.array([[0.5, -1.25, 2.0], [4.0, 4.0, 1.0]])
    np.testing.assert_allclose(estimate_unit_effects(fixture), [1.25 / 3, 3.0])
    with pytest.raises(ValueError):
        estimate_unit_effects(np.zeros((2, 0)))


def test_spec_test_examples():
    res = spec_test(np.full(50, 1.5), np.ones(50), 1.5, n_draws=200)
    assert res.statistic == 0.0 and not any(res.reject.values())
    eff = np.zeros(1000)
    eff[17] = 100.0
    res = spec_test(eff, np.ones(1000), 0.0, n_draws=200)
    assert all(res.reject.values())
    cv = [res.critical_values[l] for l in sorted(res.critical_values)]
    assert cv[0] < cv[1] < cv[2]
    with pytest.raises(ValueError):
        spec_test(eff, np.zeros(1000), 0.0)
    with pytest.raises(ValueError):
        spec_test(eff, np.ones(1000), 0.0, n_draws=50)


def test_spec_test_rescale_invariance(rng):
    eff = rng.standard_normal(40)
    var = rng.uniform(0.5, 2.0, 40)
    a = spec_test(eff, var, 0.2, n_draws=150, seed=3)
    b = spec_test(5.0 * eff, 25.0 * var, 1.0, n_draws=150, seed=3)
    assert b.statistic == pytest.approx(a.statistic, rel=1e-12)
    assert b.critical_values == a.critical_values


def test_spec_test_dict_input():
    res = spec_test({1: [1.0, 2.0], 2: [5.0]}, {1: [1.0, 1.0], 2: [4.0]}, {1: 1.0, 2: 3.0}, n_draws=100)
    assert res.statistic == pytest.approx(1.0) and res.n_cells == 3


def test_bootstrap_matches_exact_max_normal_quantile():
    k = 25
    draws = bootstrap_max_abs(k, 4000, seed=11)
    for level in (0.9, 0.95):
        exact = ndtri((1 + level ** (1 / k)) / 2)
        assert abs(np.quantile(draws, level) - exact) < 0.08
    np.testing.assert_array_equal(draws[:10], bootstrap_max_abs(k, 10, seed=11))


def test_twfe_recovers_additive_effect():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(12), rng.standard_normal(9)
    y = a[:, None] + b[None, :]
    treated = np.zeros((12, 9), bool)
    treated[6:, 5:] = True
    y = y + 2.5 * treated
    assert twfe_effects(y, {1: treated})[1] == pytest.approx(2.5, abs=1e-10)


def interactive_fixture(noise=0.0, effect=True, seed=0):
    rng = np.random.default_rng(seed)
    n_per, t, pilot = 12, 24, 14
    zeta = rng.normal(1.0, 1.0, (3 * n_per, 2))
    eta0 = rng.normal(1.0, 1.0, (t, 2))
    etas = {0: eta0}
    for d in (1, 2):
        e = eta0.copy()
        if effect:
            e[pilot:] += rng.normal(0.5 * d, 1.0, (t - pilot, 2))
        etas[d] = e
    truth = {d: zeta @ etas[d].T for d in etas}
    groups = {d: list(range(d * n_per, (d + 1) * n_per)) for d in range(3)}
    y = truth[0].copy()
    for d in (1, 2):
        y[groups[d], pilot:] = truth[d][groups[d], pilot:]
    y = y + noise * rng.standard_normal(y.shape)
    tp = TreatmentPanel(ObservedPanel(y), TreatmentAssignment(groups, pilot_start=pilot))
    return tp, truth, groups


def test_noiseless_effects_match_truth():
    tp, truth, groups = interactive_fixture()
    group = groups[2][:4]
    res = estimate_effects(tp, group, 2, SolverOptions(max_iters=5000), periods=[15, 20])
    for t in (15, 20):
        for d in (1, 2):
            mu = np.mean(truth[d][group, t] - truth[0][group, t])
            assert res.mu[(d, t)] == pytest.approx(mu, abs=1e-3)
        assert res.theta[(1, t)] == res.mu[(1, t)]


def test_null_effects_within_three_se():
    tp, _, groups = interactive_fixture(noise=0.3, effect=False, seed=4)
    res = estimate_effects(tp, groups[1][:3], 2, windows=weekly_windows(range(14, 24), 5), unit_level=True)
    z = [abs(res.mu[k]) / np.sqrt(res.var_mu[k]) for k in res.mu]
    assert np.mean(np.array(z) <= 3) >= 0.95
    assert set(res.window_theta) == {(1, 0), (1, 1), (2, 0), (2, 1)}
    assert res.unit_theta[2].shape == (3, 10)
    assert np.all(res.unit_var_theta[2] > 0)
    lo, hi = res.ci("theta", 2, 14)
    assert lo < res.theta[(2, 14)] < hi


def test_effects_validate_inputs():
    tp, _, groups = interactive_fixture()
    with pytest.raises(ValueError):
        estimate_effects(tp, [], 2)
    with pytest.raises(ValueError):
        estimate_effects(tp, groups[1], 2, periods=[3])
