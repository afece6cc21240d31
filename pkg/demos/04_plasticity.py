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
# # Warm versus cold start on a growing observation set
#
# Pre-train on 180 of 900 entries of a rank-3 matrix, then add 90 more.
# A warm run continues from the pre-trained factors. A cold run restarts from
# the same initialization. Compare the effective rank of the two solutions.
# One trial at depth 2 takes a few seconds; deeper chains take minutes.

# %%
from deepfact.core import Gaussian, build_init
from deepfact.experiments import (
    PlasticityProtocol,
    RankR,
    TrainSettings,
    generate_ground_truth,
    run_plasticity,
    sample_nested_observations,
)

truth = generate_ground_truth(RankR(30, 3, 100))
pre, post = sample_nested_observations(30, [180, 270], 200, truth)
settings = TrainSettings("gd", 1e-3, 1e-3, max_iters=2_000_000)
protocol = PlasticityProtocol(pre, post, ("pre-only", "warm", "cold"), settings, settings)

# %%
res = run_plasticity(protocol, build_init(Gaussian(1e-2, 0), 2, 30), truth)
for mode, r in res.items():
    print(f"{mode:9s} eff rank {r.effective_rank:.3f}  rel error {r.reconstruction_error:.3f}  converged {r.converged}")
print(f"gap {res['warm'].effective_rank - res['cold'].effective_rank:.3f}")
