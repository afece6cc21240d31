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
# # Running a sweep from a TOML file
#
# The `deepfact` command reads one TOML config per run and writes CSV plus a
# `summary.json`. Tiny initial scales go through the reduced eigenvalue ODE,
# whose adaptive step covers the long plateau before the escape.

# %%
import csv
import tempfile
from pathlib import Path

from deepfact.cli import main

work = Path(tempfile.mkdtemp())
(work / "sweep.toml").write_text("""
dim = 3
depth = [2, 3]
[init]
scheme = "alpha_m"
alpha = [1e-6, 0.1]
m = 2
[obs]
mode = "block"
count = 3
[integrator]
method = "rk4"
t_max = 1e7
stop_loss = 1e-10
""")

# %%
assert main(["sweep", "--config", str(work / "sweep.toml"), "--out", str(work / "out")]) == 0
with open(work / "out" / "sweep.csv") as fh:
    for row in csv.DictReader(fh):
        print(f"L={row['depth']} alpha={row['alpha']:6s} {row['route']:7s} converged={row['converged']:5s}"
              f" sigma1={float(row['sigma1']):.6f} predicted={float(row['predicted_sigma1']):.6f}")
