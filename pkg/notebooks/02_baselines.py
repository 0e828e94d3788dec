# %% [markdown]
# Baselines against the optimal threshold
# =======================================
#
# Two heuristics: stop at a fixed step, or stop at the first alert. Their
# early-stop rates have closed forms under a geometric onset, which we
# compare with simulation.

# %%
from ipstop import solver
from ipstop.dists import appendix_uniform, custom_table
from ipstop.policies import BeliefThreshold, FirstAlert, FixedTime, Oracle
from ipstop.sim import EnvConfig, run_batch

env = EnvConfig(appendix_uniform())
p = env.transition.p

# %% [markdown]
# Fixed step k=6 stops early exactly when onset comes after step 6.

# %%
_, m = run_batch(FixedTime(6), env, 10000, seed=1)
print("fixed-6 early stop: simulated %.4f, analytic %.4f" % (m.early_stopping_probability, (1 - p) ** 6))

# %% [markdown]
# First alert on a model where a quiet step raises an alert with
# probability q. The early-stop rate is (1-p)q / (1 - (1-p)(1-q)).

# %%
for q in (0.1, 0.27, 0.5, 0.9):
    model = custom_table({"0": {"0": 1 - q, "1": q}, "1": {"1": 1}}, bounds=(1, 0, 0))
    _, m = run_batch(FirstAlert(), EnvConfig(model), 10000, seed=2)
    exact = (1 - p) * q / (1 - (1 - p) * (1 - q))
    print("q=%.2f  simulated %.4f  analytic %.4f" % (q, m.early_stopping_probability, exact))

# %% [markdown]
# All four policies on shared episode seeds.

# %%
pomdp = env.pomdp
alpha = solver.stopping_set(solver.value_iteration(pomdp), pomdp).alpha_star
rows = []
for name, pol in [("threshold", BeliefThreshold(alpha)), ("fixed-6", FixedTime(6)),
                  ("first-alert", FirstAlert()), ("oracle", Oracle())]:
    _, m = run_batch(pol, env, 5000, seed=3)
    rows.append((name, m.mean_episodic_reward, m.early_stopping_probability, m.mean_intrusion_to_stop_delay))
for r in rows:
    print("%-12s reward %8.2f  early stop %.3f  delay %.2f" % r)
print("best heuristic:", max(rows[1:3], key=lambda r: r[1])[0])
