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
# # Where gradient descent ends up on a block target
#
# A depth-L product of identical `alpha/m` factors is trained on the
# diagonal of a 3x3 matrix. The predicted limit spectrum comes from a
# scalar root solve; gradient descent should land on it.

# %%
import numpy as np

from deepfact.core import AlphaM, BlockSpec, build_init, build_observation_block
from deepfact.flow import run_gradient_descent
from deepfact.theory import predict_limit

spec = BlockSpec(block_size=1, num_blocks=3)
obs = build_observation_block(spec)

# %%
for depth in (2, 3, 4):
    scheme = AlphaM(1e-2 ** (1 / depth), m=5.0)
    traj = run_gradient_descent(build_init(scheme, depth, 3), obs, 1e-3, max_iters=2_000_000, stop_loss=1e-16)
    want = predict_limit(spec, scheme, depth)
    print(f"L={depth}  gd {np.round(traj.singular_values[-1], 6)}  predicted {np.round(want.singular_values(), 6)}"
          f"  branch {want.branch.value}")

# %% [markdown]
# ## Smaller initializations push the limit towards rank one
#
# The stable rank of the predicted limit drops towards 1 as the scale shrinks.

# %%
from deepfact.theory import ImplicitParams, solve_implicit

for k in (2, 4, 6, 8, 10):
    lim = solve_implicit(ImplicitParams(alpha=10.0**-k, m=5.0, depth=3, num_blocks=5, block_size=2))
    print(f"alpha=1e-{k:<2d} sigma1={lim.sigma1:.6f} sigma2={lim.sigma_secondary:.3e} srank={lim.stable_rank:.12f}")
