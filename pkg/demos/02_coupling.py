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
# # When do observed entries train independently?
#
# Two observed entries are coupled when their gradients overlap. The Gram
# matrix of entry gradients tells us which ones interact.

# %%
import numpy as np

from deepfact.core import AlphaM, BlockSpec, build_init, build_observation_block
from deepfact.graph import detect_decoupling, gram_matrix

diag = build_observation_block(BlockSpec(1, 3))

# %%
for depth in (2, 3):
    rep = detect_decoupling(build_init(AlphaM(0.1, 2.0), depth, 3), diag)
    rule = rep.structural_rule.value if rep.structural_rule else "numeric"
    print(f"depth {depth}: {rep.verdict.value} ({rule}), parts {rep.partition}")

# %% [markdown]
# At depth 3 the off-diagonal Gram entries are non-zero.

# %%
print(np.round(gram_matrix(build_init(AlphaM(0.1, 2.0), 3, 3), diag), 6))

# %% [markdown]
# Identity-like factors keep block targets separate at any depth.

# %%
blocks = build_observation_block(BlockSpec(2, 3))
for depth in (3, 4):
    rep = detect_decoupling(build_init(AlphaM(0.1), depth, 6), blocks)
    print(f"depth {depth}: {rep.verdict.value} via {rep.structural_rule.value}")
