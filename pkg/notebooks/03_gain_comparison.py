# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Gramian gain vs optimized gain
#
# The empirical gramian estimate of the L2 gain needs only `2m` simulations under `+-sigma w_i`.
# The optimized gain searches the whole ball of inputs. On a linear system they agree. On the
# AFM cantilever they agree as long as the input stays small enough for the response to be
# close to linear.

# %%
from ambiguity import MeasureSettings, TimeMap, lgl_grid
from ambiguity.measures import gramian_gain, lp_gain
from ambiguity.models import FourierControlSpace, afm_entry, lti_model
from ambiguity.transcription import collocate

m = lti_model([[0.0, 1.0], [-2.0, -0.3]], B=[[0.0], [1.0]], C=[[1.0, 0.0]])
tm = TimeMap(0.0, 7.0)
W = FourierControlSpace(0, 1, 0.0, 7.0)
g = gramian_gain(m, [0.0, 0.0], W, 0.03, time_map=tm).value
opt = lp_gain(m, collocate(m, [0.0, 0.0], tm, lgl_grid(30)), W, 0.03, 2, settings=MeasureSettings(starts=2)).value
print(f"LTI: gramian {g:.5f}  optimized {opt:.5f}")

# %% [markdown]
# AFM at `delta = 1`. The gramian estimate only needs simulations, so it is cheap to sweep `sigma`.
# The estimate stays flat up to `sigma ~ 0.3` and then falls as the tip force saturates.

# %%
e = afm_entry()
for sigma in (0.03, 0.1, 0.3, 1.0):
    print(f"sigma={sigma:<5}  gramian gain {gramian_gain(e.model, e.x0, W, sigma, control=e.control).value:.4f}")
