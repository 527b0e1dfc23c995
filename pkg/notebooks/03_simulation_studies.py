"""
Monte-Carlo studies at desk scale
=================================

The staggered-adoption design with fewer replications than the full-scale
preset, plus the category-driven adoption protocol on a synthetic
38 x 31 stand-in matrix. The acceptance suite runs the full-size versions.
"""

# %%
from mnarmc.simlab import SimConfig, run_experiment

cfg = SimConfig.preset("staggered_basic", replications=20)
rep = run_experiment(cfg)
print("RMSE", rep.rmse)
print("coverage", rep.coverage["pipeline"])
print(f"{rep.wall_time:.1f}s, {len(rep.failures)} failures")

# %%
z = rep.standardized()
print(f"standardized errors: mean {z.mean():.2f}, sd {z.std():.2f}")

# %%
tob = run_experiment(SimConfig.preset("tobacco_protocol", replications=5))
print("tobacco stand-in RMSE over missing cells", tob.rmse)
