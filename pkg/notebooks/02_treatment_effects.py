"""
Treatment effects with several treatments and a specification test
==================================================================

A scaled-down version of the interactive-effects design: three groups
(control and two treatments), covariates with known coefficients, and
per-period effects mu (versus control) and theta (versus the previous
treatment) for one treated unit group.
"""

# %%
import numpy as np

from mnarmc.simlab import SimConfig, gen_interactive
from mnarmc.treatment import bonferroni_critical_value, estimate_effects, spec_test, twfe_theta, weekly_windows

cfg = SimConfig.preset("interactive_effects", group_sizes=(40, 40, 40), n_periods=60, change_points=(40,))
sample = gen_interactive(cfg, seed=1)
tp = sample.panel
group = list(tp.assignment.groups[2][:5])
periods = tuple(range(40, 60))

# %%
eff = estimate_effects(tp, group, r=2, periods=periods, windows=weekly_windows(periods, 5), unit_level=True)
for d, t, mu, theta, var_mu, var_theta in eff.rows()[-3:]:
    true_mu = np.mean(sample.truth[d][group, t] - sample.truth[0][group, t])
    print(f"d={d} t={t}: mu {mu:.3f} (truth {true_mu:.3f}, se {np.sqrt(var_mu):.3f}), theta {theta:.3f}")

# %%
# weekly averages of theta and a Bonferroni band over the four windows
z = bonferroni_critical_value(len(eff.windows))
for (d, k), v in sorted(eff.window_theta.items()):
    se = np.sqrt(eff.window_var[(d, k)])
    print(f"theta^{d} window {k}: {v:.3f} +- {z * se:.3f}")

# %%
# model specification: are unit-level effects all equal to the two-way FE estimate?
res = spec_test(eff.unit_theta, eff.unit_var_theta, twfe_theta(tp), n_draws=500, seed=0)
print(f"statistic {res.statistic:.2f}, critical values {res.critical_values}, reject {res.reject}")
