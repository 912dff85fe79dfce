"""
Fear scores and muscle fatigue: a random-intercept model
========================================================

Interval-level data for 19 simulated climbers.  We check the fear scale,
look at within-person correlations and fit total fear on the EMG
centroid with a random intercept per climber.
"""
import numpy as np

from mixednet import stats
from mixednet.signal import FEAR_ITEMS
from mixednet.synth import COEFFICIENTS, SynthConfig, generate_interval_data

data = generate_interval_data(SynthConfig(seed=3))
print(data.head())

# the three items are built around a common total, so they hang together
items = data[FEAR_ITEMS].to_numpy()
pca = stats.pca_first_component(items)
print(f"Cronbach's alpha {stats.cronbach_alpha(items):.3f}")
print(f"first component explains {pca.explained_ratio:.1%}, loadings {np.round(pca.loadings, 3)}")

# repeated-measures correlation removes each climber's own mean first
corr = stats.rm_corr_matrix(data, ["mnf_mean", "iemg_mean", "total_fear", "pump"])
print(corr.round(4))

fit = stats.fit_lmm(data, "MNF")
table = fit.table()
table["truth"] = [COEFFICIENTS[k] for k in
                  ("intercept", "mnf", "lead", "interval2", "interval3", "interval4",
                   "experience", "mnf_style")]
print(table.round(4).to_string(index=False))
print(f"random intercept variance {fit.random_intercept_var:.3f}, residual {fit.residual_var:.3f}")

# residual checks
diag = stats.diagnostics(fit)
gq, p = diag["goldfeld_quandt"]
qq = diag["qq"]
print(f"Goldfeld-Quandt {gq:.3f} (p = {p:.3f})")
print(f"Q-Q correlation {np.corrcoef(qq['theoretical'], qq['sample'])[0, 1]:.4f}")

# the amplitude predictor for comparison
alt = stats.fit_lmm(data, "IEMG")
print(alt.table().round(4).to_string(index=False))
