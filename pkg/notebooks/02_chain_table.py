# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Observability of an integrator chain
#
# The companion-form chain with characteristic polynomial `(s + 1)^n` (see
# `ambiguity.models.chain_system`) is observed through `x1` only. Longer chains hide the initial state better: the output tube of radius
# `1e-6` admits larger and larger initial deviations. Small `n` runs in seconds. The full
# table up to `n = 9` is `ambiguity reproduce table1`.

# %%
from ambiguity import MeasureSettings, TimeMap, TrajectoryMetric, lgl_grid, observability_ambiguity
from ambiguity.cli import TABLE1
from ambiguity.models import catalog_entry
from ambiguity.transcription import collocate

rows = []
for n in (2, 3, 4, 5):
    e = catalog_entry("chain", n=n)
    nominal = collocate(e.model, e.x0, TimeMap(0.0, 15.0), lgl_grid(30))
    rep = observability_ambiguity(e.model, nominal, 1e-6, TrajectoryMetric("Linf"),
                                  settings=MeasureSettings(starts=2))
    rows.append((n, rep.value, TABLE1[n]))

for n, value, ref in rows:
    print(f"n={n}  rho_o={value:.4e}  published={ref:.3e}  ratio={value / ref:.3f}")

# %% [markdown]
# Each step in `n` multiplies the ambiguity by roughly six. The tube is tight, so the ratio
# `rho_o / eps` measures how weakly the output reflects the initial state.
