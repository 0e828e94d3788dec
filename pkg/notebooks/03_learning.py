# %% [markdown]
# Learning a stopping rule with PPO
# =================================
#
# A short training run on the uniform model, then a probe of a policy
# trained on the three-counter synthetic model. Iteration counts are kept
# small so the script finishes in about a minute; the acceptance tests run
# the full-length versions.

# %%
import numpy as np
from scipy.stats import spearmanr

from ipstop import learner, solver
from ipstop.dists import appendix_uniform, synthetic_model
from ipstop.policies import NeuralPolicy, probe_grid
from ipstop.sim import EnvConfig, run_batch

env = EnvConfig(appendix_uniform())
pomdp = env.pomdp
optimum = solver.episode_start_value(solver.value_iteration(pomdp), pomdp)
print("exact optimum from a clean start: %.2f" % optimum)

# %%
cfg = learner.TrainerConfig(features="belief", iterations=20, seed=0)
res = learner.train(env, cfg)
for rec in res.curve[::5]:
    print(rec["iteration"], round(rec["policy_mean_episodic_reward"], 2), round(rec["entropy"], 3))
_, m = run_batch(res.policy, env, 5000, seed=99)
print("belief-input policy: %.2f" % m.mean_episodic_reward)

# %% [markdown]
# On the synthetic model with three counters the network sees cumulative
# counts. The stop log-odds should rise with total alerts x+y at a
# fixed step.

# %%
full = EnvConfig(synthetic_model("full_synthetic"))
res = learner.train(full, learner.TrainerConfig(iterations=15, seed=0))
pol = NeuralPolicy(res.params, "summary", full.observations.bounds, full.max_steps)
g = probe_grid(pol, {"x": np.arange(0, 81, 5), "y": np.arange(0, 161, 10), "z": [30], "t": [10]})
s = g["x"] + g["y"]
print("Spearman(x+y, log-odds) at t=10: %.3f" % spearmanr(s, g["stop_log_odds"]).statistic)
for lo in range(0, 241, 40):
    sel = (s >= lo) & (s < lo + 40)
    print("x+y in [%3d, %3d): mean stop prob %.3f" % (lo, lo + 40, g["stop_probability"][sel].mean()))
