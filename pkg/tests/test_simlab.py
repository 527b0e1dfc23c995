import json
import math

import numpy as np
import pytest

from mnarmc.simlab import (
    TOBACCO_YEARS,
    SimConfig,
    gen_interactive,
    gen_staggered,
    gen_tobacco_protocol,
    run_coverage_experiment,
    run_experiment,
    run_rmse_experiment,
    synthetic_tobacco_base,
    tobacco_categories,
)

SMALL = dict(group_sizes=(40, 20, 20, 20), n_periods=60, change_points=(30, 40, 50))


def small_staggered(**kw):
    return SimConfig.preset("staggered_basic", **{**SMALL, **kw})


def small_interactive(**kw):
    base = dict(group_sizes=(20, 20, 20), n_periods=40, change_points=(20,))
    return SimConfig.preset("interactive_effects", **{**base, **kw})


def test_full_scale_defaults():
    cfg = SimConfig.preset("staggered_basic")
    assert cfg.group_sizes == (200, 100, 100, 100) and cfg.n_periods == 500
    assert cfg.change_points == (200, 300, 400) and cfg.replications == 1000
    icfg = SimConfig.preset("interactive_effects")
    assert icfg.group_sizes == (250, 250, 250) and icfg.change_points == (250,) and icfg.beta == (1.0, 1.0)
    assert SimConfig.preset("staggered_basic", "ci").replications == 200
    with pytest.raises(ValueError):
        SimConfig.preset("nope")
    with pytest.raises(ValueError):
        SimConfig.preset("staggered_basic", replications=0)


def test_config_round_trip():
    cfg = small_staggered(seed=5)
    assert SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_staggered_determinism_and_mask():
    cfg = small_staggered()
    p1, m1, pat = gen_staggered(cfg, 3, 1)
    p2, m2, _ = gen_staggered(cfg, 3, 1)
    assert p1.values[p1.mask].tobytes() == p2.values[p2.mask].tobytes()
    assert not np.array_equal(gen_staggered(cfg, 3, 2)[1], m1)
    assert pat.kind == "Staggered"
    assert p1.mask[:40].all()
    assert p1.mask[40:60, :30].all() and not p1.mask[40:60, 30:].any()
    assert not p1.mask[60:80, 40:].any() and not p1.mask[80:, 50:].any()


def test_staggered_zero_noise():
    p, m, _ = gen_staggered(small_staggered(noise_sd=0.0), 0)
    np.testing.assert_array_equal(p.values[p.mask], m[p.mask])
    assert np.linalg.matrix_rank(m) == 2


def test_interactive_structure():
    cfg = small_interactive(noise_sd=0.0)
    s = gen_interactive(cfg, 1)
    s2 = gen_interactive(cfg, 1)
    assert s.panel.base.values.tobytes() == s2.panel.base.values.tobytes()
    tp = s.panel
    assert tp.covariates.shape == (60, 40, 2)
    assert not tp.covariates[:, :20, 1].any() and tp.covariates[:, 20:, 1].all()
    y = tp.adjusted_values()
    np.testing.assert_allclose(y[:, :20], s.truth[0][:, :20], atol=1e-12)
    np.testing.assert_allclose(y[20:40, 20:], s.truth[1][20:40, 20:], atol=1e-12)
    np.testing.assert_allclose(y[40:, 20:], s.truth[2][40:, 20:], atol=1e-12)
    for d in range(3):
        _, pat = tp.panel(d)
        assert pat.kind == "Block"


def test_tobacco_categories_engineered():
    split = TOBACCO_YEARS.index(1986)
    changes = [-5.0] * 6 + [-12.0] * 6 + [-17.0] * 6 + [-30.0] * 20
    base = np.empty((38, 31))
    for i, c in enumerate(changes):
        base[i, :split] = 100.0
        base[i, split:] = 100.0 + c
    cats, pct = tobacco_categories(base)
    counts = [cats.count(c) for c in ("severe", "moderate", "mild", "good")]
    assert counts == [6, 6, 6, 20]
    np.testing.assert_allclose(pct, changes)
    panel, _, pattern, _ = gen_tobacco_protocol(base, seed=4)
    y86, y91, y96 = (TOBACCO_YEARS.index(y) for y in (1986, 1991, 1996))
    severe_missing = [i for i in range(6) if not panel.mask[i, y86]]
    assert len(severe_missing) == 3
    assert all(not panel.mask[i, y86:].any() for i in severe_missing)
    assert all(panel.mask[i, :y91].all() and not panel.mask[i, y91:].any()
               for i in range(6) if i not in severe_missing)
    assert panel.mask[18:].all()
    assert pattern.kind == "Staggered"
    again, *_ = gen_tobacco_protocol(base, seed=4)
    np.testing.assert_array_equal(again.mask, panel.mask)
    with pytest.raises(ValueError):
        gen_tobacco_protocol(base[:, :30])


def test_tobacco_stand_in_has_every_category():
    base, truth = synthetic_tobacco_base(0, 0)
    cats, _ = tobacco_categories(base)
    assert base.shape == (38, 31)
    assert all(cats.count(c) > 0 for c in ("severe", "moderate", "mild", "good"))


def test_zero_noise_rmse():
    rep = run_rmse_experiment(small_staggered(noise_sd=0.0, replications=3))
    assert rep.failures == []
    assert rep.rmse["pipeline"] <= 1e-3


def test_report_outputs_and_determinism():
    cfg = small_staggered(replications=4)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert a.to_csv() == b.to_csv()
    assert set(a.rmse) == {"pipeline", "baseline"}
    assert set(a.coverage["pipeline"]) == {0.9, 0.95, 0.99}
    s = json.loads(a.to_json())
    assert s["replications"] == 4 and s["failures"] == 0
    header = a.to_csv().splitlines()[0]
    assert header == "rep,target,estimate,truth,variance,z,baseline"
    assert all(math.isfinite(z) for z in a.standardized())


def test_interactive_targets():
    rep = run_coverage_experiment(small_interactive(replications=2))
    assert set(rep.coverage) == {"mu1", "mu2", "theta2"}
    with pytest.raises(ValueError):
        run_coverage_experiment(SimConfig.preset("tobacco_protocol", replications=1))


def test_tobacco_experiment_runs():
    rep = run_experiment(SimConfig.preset("tobacco_protocol", replications=2))
    assert rep.failures == [] and math.isfinite(rep.rmse["pipeline"])
