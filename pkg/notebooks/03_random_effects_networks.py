"""
Does a per-climber intercept help the networks?
===============================================

Windows of EMG centroid, heart rate and arm acceleration predict the fear
score of the interval they fall in.  Climbers differ in their baseline, so
a network that only sees the signals carries that spread as error.  The
random-effects variants learn it through the marginal likelihood.

A short run: three seeds instead of ten.
"""
import numpy as np

from mixednet.pipeline import RunConfig, build_window_dataset, run_experiment, split_dataset
from mixednet.synth import SynthConfig, feature_frames

feats, manifest, people = feature_frames(SynthConfig(seed=7))
data = build_window_dataset(feats, manifest)
split = split_dataset(data, seed=0)
print(f"{len(data)} windows from {len(feats)} climbs;",
      {k: len(v) for k, v in split.items()})
print(f"true intercept sd {people['b'].std():.2f}, target sd {data.targets.std():.2f}")

rows = []
for arch in ("linear", "gru"):
    for re in (False, True):
        cfg = RunConfig(arch=arch, random_effects=re, learning_rate=1e-3, seeds=[0, 1, 2])
        report, models = run_experiment(cfg, data, keep_models=True)
        mean, sd = report.aggregate["rmse"]
        rows.append((arch, re, mean, sd, report.ratios()["rmse_sd"]))
        if re:
            m = models[0]
            print(f"{arch}-RE seed 0: sigma_b {m.covariance.sigma_b[0]:.3f},"
                  f" sigma_e {m.covariance.sigma_e:.3f} (standardized units), best epoch {m.best_epoch}")

print(f"{'model':10s} {'rmse':>12s} {'rmse/sd':>8s}")
for arch, re, mean, sd, ratio in rows:
    print(f"{arch + ('-RE' if re else ''):10s} {mean:6.3f} ± {sd:4.3f} {ratio:8.3f}")

# learning curves of the last model
print(models[0].curves.tail().round(4))
print("epochs run:", [len(m.curves) for m in models.values()], np.round(report.per_seed["rmse"], 3).tolist())
