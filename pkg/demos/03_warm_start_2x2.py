# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # A 2x2 warm start keeps its rank
#
# Start from `A = B = I`, which fits the diagonal exactly, then reveal one
# off-diagonal entry. Training fits the new entry while the unobserved
# corner is pushed negative, so the product stays far from rank one.

# %%
import numpy as np

from deepfact.core import FactorChain, ObservationSet, product
from deepfact.flow import IntegratorConfig, integrate_gradient_flow
from deepfact.metrics import stable_rank
from deepfact.theory import lop_2x2_bounds

post = ObservationSet.from_entries(2, [(0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.1)])
traj = integrate_gradient_flow(FactorChain.from_matrices([np.eye(2), np.eye(2)]), post, IntegratorConfig(t_max=100.0))
bounds = lop_2x2_bounds(1.0, 0.1)

# %%
print("final product\n", np.round(product(traj.final_chain), 6))
print(f"stable rank {stable_rank(traj.products[-1]):.4f} >= bound {bounds.srank_lower:.4f}")
print("loss below envelope at every sample:", bool(np.all(traj.losses <= bounds.envelope(traj.times) * (1 + 1e-12))))

# %% [markdown]
# ## Closed-form pre-training
#
# When the observed entries form a permutation, the depth-2 flow limit has
# a closed form.

# %%
from deepfact.theory import pretrain_closed_form

rng = np.random.default_rng(0)
obs = ObservationSet.from_entries(3, [(0, 1, 1.0), (1, 2, 0.5), (2, 0, 2.0)])
A0, B0 = 0.3 * rng.standard_normal((3, 3)), 0.3 * rng.standard_normal((3, 3))
A, B = pretrain_closed_form(A0, B0, obs)
flow = integrate_gradient_flow(FactorChain.from_matrices([B0, A0]), obs, IntegratorConfig(t_max=1e3, stop_loss=1e-20))
print("max gap to flow:", np.max(np.abs(flow.final_chain[1] - A)))
