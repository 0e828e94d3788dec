# %% [markdown]
# Exact stopping threshold on the small uniform model
# ====================================================
#
# The `appendix_uniform` preset has a scalar observation: 0..4 uniformly
# while the network is clean, 0..5 uniformly once an intrusion runs. A
# reading of 5 therefore proves an intrusion. We solve the POMDP exactly
# and look at the threshold it implies.

# %%
from ipstop import solver
from ipstop.dists import appendix_uniform
from ipstop.model import IntrusionPOMDP, TransitionModel

pomdp = IntrusionPOMDP(appendix_uniform(), TransitionModel(0.2))
V = solver.value_iteration(pomdp)
print("iterations:", V.iterations, "converged:", V.converged)

# %% [markdown]
# The value function is the upper envelope of a handful of lines over the
# belief `b1`. Each row is (value at b1=0, value at b1=1).

# %%
print(V.vectors)
print("V(0) =", V(0.0), " V(1) =", V(1.0))

# %% [markdown]
# Sweep a grid, classify each belief, and bisect for the switch point.

# %%
a = solver.stopping_set(V, pomdp, 1001)
print("alpha* = %.6f" % a.alpha_star)
print("stop region:", a.stopping_set)

# the generalized curve b1 - alpha(b1) crosses zero at alpha*
for b in (0.0, 0.2, 0.35, 0.36, 0.5, 1.0):
    i = int(round(b * 1000))
    print("b1=%.3f  b1-alpha=%+.4f  stop=%d" % (a.grid[i], a.curve[i], a.stop_mask[i]))

# %% [markdown]
# What a simulated episode is worth under the optimal rule. The first
# observation arrives before the first decision, so the value from a
# clean start averages V over the first posterior.

# %%
print("episode start value: %.4f" % solver.episode_start_value(V, pomdp))
