# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Linear oracles
#
# For a linear system with an L2 output tube, the ambiguity of the initial state has a closed
# form: `rho_o = eps / sqrt(lambda_min(P))` with `P` the finite-horizon observability gramian.
# The optimizer does not know this. Here we compare the two on a damped oscillator.

# %%
import numpy as np

from ambiguity import LtiSystem, MeasureSettings, TimeMap, TrajectoryMetric, lgl_grid, observability_ambiguity
from ambiguity.linear_oracles import ambiguity_from_gramian, observability_gramian, weakest_direction
from ambiguity.models import lti_model
from ambiguity.transcription import collocate

A = np.array([[0.0, 1.0], [-2.0, -0.3]])
C = np.array([[1.0, 0.0]])
T, eps = 5.0, 1e-3

# %%
P = observability_gramian(LtiSystem(A, np.zeros((2, 0)), C, (0.0, T)))
lam, v = weakest_direction(P)
print("lambda_min", lam, "direction", v)
print("closed form rho_o", ambiguity_from_gramian(P, eps))

# %% [markdown]
# The transcribed problem maximizes `|x(0) - x_nominal(0)|` subject to the tube.

# %%
model = lti_model(A, C=C)
nominal = collocate(model, [1.0, 0.0], TimeMap(0.0, T), lgl_grid(24))
rep = observability_ambiguity(model, nominal, eps, TrajectoryMetric("L2"), settings=MeasureSettings(starts=2))
print("optimizer rho_o", rep.value, "verified", rep.feasibility["verified"])
dx0 = rep.worst_trajectory.states[:, 0] - nominal.states[:, 0]
print("worst direction", dx0 / np.linalg.norm(dx0))

# %% [markdown]
# The worst initial deviation lines up with the weakest gramian eigenvector, up to sign.
