"""Finite-difference gradient suites for the likelihood and the networks."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .autodiff import check_gradients
from .mixed import CovarianceParams, RandomEffectsDesign, marginal_nll
from .models import ARCHITECTURES, WindowBatch, build_params, forward_graph

TOLERANCE = 1e-5
SUITES = ("nll_intercept", "nll_slopes") + ARCHITECTURES


def _nll_case(rng, mode):
    n = int(rng.integers(6, 31))
    J = int(rng.integers(1, 6))
    ids = np.concatenate([np.arange(J), rng.integers(0, J, n - J)])
    x = rng.normal(size=n)
    design = RandomEffectsDesign.from_ids(ids, mode, slope_covariate=x if mode == "slopes" else None)
    q = design.q
    cov = CovarianceParams(rng.normal(0, 0.5, q), rng.normal(0, 0.5, q * (q - 1) // 2),
                           rng.normal(0, 0.3))
    params = {"f": rng.normal(size=(n, 1)), **cov.as_arrays()}
    y = rng.normal(size=n) * 2

    def loss(g, leaves):
        psi = {k: v for k, v in leaves.items() if k != "f"}
        return marginal_nll(leaves["f"], y, design, psi)

    return loss, params


def _network_case(rng, arch, batch=4, n_features=2, n_meta=2, hidden=3, meta_hidden=2):
    data = WindowBatch(rng.normal(size=(batch, 30, n_features)), rng.normal(size=(batch, n_meta)),
                       rng.normal(size=batch), np.arange(batch))
    params = build_params(arch, n_features, n_meta, hidden, int(rng.integers(2 ** 31)), meta_hidden)
    arrays = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.arrays.items()}
    mask_seed = int(rng.integers(2 ** 31))
    y = data.targets.reshape(-1, 1)

    def loss(g, leaves):
        # same dropout mask on every evaluation
        out = forward_graph(g, leaves, arch, data, training=True,
                            rng=np.random.default_rng(mask_seed))
        return g.scalar_mul(g.sum(g.square(g.sub(out, g.constant(y)))), 0.5)

    return loss, arrays


def run_suite(name, points=20, seed=0, h=1e-6) -> pd.DataFrame:
    """Worst per-parameter relative error at each random point."""
    if name not in SUITES:
        raise ValueError(f"unknown gradient suite {name!r}; choose from {SUITES}")
    rng = np.random.default_rng([seed, SUITES.index(name)])
    rows = []
    for point in range(points):
        if name.startswith("nll"):
            loss, params = _nll_case(rng, name.split("_")[1])
        else:
            loss, params = _network_case(rng, name)
        errs = check_gradients(loss, params, h)
        worst = max(errs, key=errs.get)
        rows.append({"suite": name, "point": point, "max_rel_err": errs[worst], "worst_param": worst})
    return pd.DataFrame(rows)


def run_all(points=20, seed=0, h=1e-6) -> pd.DataFrame:
    return pd.concat([run_suite(s, points, seed, h) for s in SUITES], ignore_index=True)
