"""Score aggregation, repeated-measures correlation and linear mixed models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd
from scipy import optimize
from scipy import stats as sst

from .autodiff import Graph
from .errors import ContractError, RankError
from .mixed import (
    CovarianceParams, RandomEffectsDesign, blup_predict, marginal_nll,
    structured_V_inverse_apply,
)
from .signal import FEAR_ITEMS, SCORE_COLUMNS, assign_intervals

PREDICTORS = {"MNF": "mnf_mean", "IEMG": "iemg_mean"}
# sigma_b below exp(-12) of the residual scale is treated as zero
LOG_SIGMA_FLOOR = -12.0


@dataclass
class IntervalObservation:
    participant_id: int
    style: int
    interval: int
    experience_years: float
    mnf_mean: float
    iemg_mean: float
    anxiety: float
    fear_falling: float
    fear_heights: float
    pump: float

    def __post_init__(self):
        if self.interval not in (1, 2, 3, 4):
            raise ContractError(f"interval must be 1..4, got {self.interval}")
        if self.style not in (0, 1):
            raise ContractError(f"style must be 0 (top rope) or 1 (lead), got {self.style}")

    @property
    def total_fear(self) -> float:
        return self.anxiety + self.fear_falling + self.fear_heights


def observations_frame(data) -> pd.DataFrame:
    """DataFrame view of IntervalObservation records (frames pass through)."""
    if isinstance(data, pd.DataFrame):
        df = data.copy()
    else:
        df = pd.DataFrame([asdict(o) for o in data])
    if "total_fear" not in df:
        df["total_fear"] = df[FEAR_ITEMS].sum(axis=1)
    return df


# -- reliability and aggregation --------------------------------------------

def cronbach_alpha(scores) -> float:
    x = np.asarray(scores, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ContractError(f"need an n x k score matrix with n, k >= 2, got shape {x.shape}")
    k = x.shape[1]
    total_var = x.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise ContractError("Cronbach's alpha undefined: row sums have zero variance")
    return float(k / (k - 1) * (1 - x.var(axis=0, ddof=1).sum() / total_var))


@dataclass
class PCAResult:
    loadings: np.ndarray
    explained_ratio: float
    rank_deficient: bool


def first_component_from_correlation(corr) -> PCAResult:
    corr = np.asarray(corr, dtype=float)
    vals, vecs = np.linalg.eigh(corr)
    lead = vecs[:, -1]
    if lead.sum() < 0:
        lead = -lead
    rank = int(np.sum(vals > 1e-10 * max(vals[-1], 1e-300)))
    return PCAResult(lead, float(vals[-1] / vals.sum()), rank < corr.shape[0])


def pca_first_component(scores) -> PCAResult:
    """Leading eigenvector of the correlation matrix and its variance share."""
    x = np.asarray(scores, dtype=float)
    if x.ndim != 2 or x.shape[0] <= x.shape[1]:
        raise ContractError(f"need more rows than columns, got shape {x.shape}")
    if np.any(x.std(axis=0) == 0):
        raise ContractError("a column has zero variance; correlation undefined")
    return first_component_from_correlation(np.corrcoef(x, rowvar=False))


# -- correlation -------------------------------------------------------------

def rm_corr(x, y, participant_ids):
    """Repeated-measures correlation and its p-value.

    Both variables are centred within participant; the common within-subject
    slope gives ``r`` and the t test has ``N - J - 1`` degrees of freedom.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ids = np.asarray(participant_ids)
    frame = pd.DataFrame({"x": x, "y": y, "id": ids})
    sizes = frame.groupby("id").size()
    if (sizes >= 2).sum() < 2:
        raise ContractError("need at least 2 participants with 2 or more observations")
    frame = frame[frame["id"].isin(sizes[sizes >= 2].index)]
    xc = frame["x"] - frame.groupby("id")["x"].transform("mean")
    yc = frame["y"] - frame.groupby("id")["y"].transform("mean")
    sxx, syy = float((xc ** 2).sum()), float((yc ** 2).sum())
    if sxx == 0 or syy == 0:
        raise ContractError("repeated-measures correlation undefined: no within-participant variance")
    r = float((xc * yc).sum() / np.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    df = len(frame) - frame["id"].nunique() - 1
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt(df / (1 - r * r))
    return r, float(2 * sst.t.sf(abs(t), df))


def fdr_correct(pvalues) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values."""
    p = np.asarray(pvalues, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ContractError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p
    order = np.argsort(p)
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def rm_corr_matrix(df: pd.DataFrame, columns, participant="participant_id") -> pd.DataFrame:
    rows = []
    for a, b in combinations(columns, 2):
        r, p = rm_corr(df[a], df[b], df[participant])
        rows.append({"var1": a, "var2": b, "r": r, "p": p})
    out = pd.DataFrame(rows, columns=["var1", "var2", "r", "p"])
    out["p_fdr"] = fdr_correct(out["p"].to_numpy())
    return out


# -- linear mixed model --------------------------------------------------------

@dataclass
class LmmFit:
    terms: list
    estimates: np.ndarray
    std_errors: np.ndarray
    z_values: np.ndarray
    p_values: np.ndarray
    random_intercept_var: float
    residual_var: float
    residuals: np.ndarray
    fitted: np.ndarray
    nll: float
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": self.terms,
            "estimate": self.estimates,
            "std_error": self.std_errors,
            "z": self.z_values,
            "p_value": self.p_values,
        })

    def coef(self, term) -> float:
        return float(self.estimates[self.terms.index(term)])


def aliased_columns(X, names, tol=1e-9):
    """Names of columns lying in the span of the columns before them."""
    keep, aliased = [], []
    for k in range(X.shape[1]):
        col = X[:, k]
        scale = np.linalg.norm(col)
        if keep:
            basis = X[:, keep]
            coef, *_ = np.linalg.lstsq(basis, col, rcond=None)
            resid = np.linalg.norm(col - basis @ coef)
        else:
            resid = scale
        if scale == 0 or resid <= tol * max(scale, 1.0):
            aliased.append(names[k])
        else:
            keep.append(k)
    return aliased


def lmm_design(data, predictor="MNF"):
    """Fixed-effects design: intercept, predictor, lead, interval dummies,
    experience, predictor x lead."""
    if predictor not in PREDICTORS:
        raise ContractError(f"predictor must be one of {list(PREDICTORS)}, got {predictor!r}")
    df = observations_frame(data)
    m = df[PREDICTORS[predictor]].to_numpy(dtype=float)
    lead = df["style"].to_numpy(dtype=float)
    interval = df["interval"].to_numpy()
    X = np.column_stack([
        np.ones(len(df)), m, lead,
        (interval == 2).astype(float), (interval == 3).astype(float), (interval == 4).astype(float),
        df["experience_years"].to_numpy(dtype=float),
        m * lead,
    ])
    names = ["Intercept", predictor, "Lead", "Interval2", "Interval3", "Interval4",
             "experience", f"{predictor}:style1"]
    return X, df["total_fear"].to_numpy(dtype=float), df["participant_id"].to_numpy(), names


def _profile(design, X, y, lsb, lse):
    params = CovarianceParams(np.array([lsb]), np.zeros(0), lse)
    VinvXy, logdet = structured_V_inverse_apply(design, params, np.column_stack([X, y]))
    XtVX = X.T @ VinvXy[:, :-1]
    beta = np.linalg.solve(XtVX, X.T @ VinvXy[:, -1])
    r = y - X @ beta
    Vinv_r, _ = structured_V_inverse_apply(design, params, r)
    nll = 0.5 * r @ Vinv_r + 0.5 * logdet + 0.5 * len(y) * np.log(2 * np.pi)
    return nll, beta, XtVX, params


def _nll_gradient(design, X, y, theta, free_sigma_b):
    """Gradient of the marginal NLL in (beta, [log sigma_b], log sigma_e)."""
    p = X.shape[1]
    g = Graph()
    beta = g.leaf(theta[:p].reshape(-1, 1), requires_grad=True)
    lsb = theta[p] if free_sigma_b else -np.inf
    psi = {"log_sigma_b": g.leaf(np.array([[lsb]]), requires_grad=free_sigma_b),
           "log_sigma_e": g.leaf(np.array([[theta[-1]]]), requires_grad=True)}
    loss = marginal_nll(g.matmul(g.constant(X), beta), y, design, psi)
    g.backward(loss)
    parts = [beta.grad.reshape(-1)]
    if free_sigma_b:
        parts.append(psi["log_sigma_b"].grad.reshape(-1))
    parts.append(psi["log_sigma_e"].grad.reshape(-1))
    return np.concatenate(parts)


def observed_information(design, X, y, beta, log_sigma_b, log_sigma_e, h=1e-5):
    """Hessian of the marginal NLL at the estimate.

    Central differences of the exact tape gradient.  A random-intercept SD at
    zero sits on the boundary and is left out of the parameter vector.
    """
    free = np.isfinite(log_sigma_b)
    theta = np.concatenate([beta, [log_sigma_b] if free else [], [log_sigma_e]])
    H = np.empty((theta.size, theta.size))
    for i in range(theta.size):
        step = h * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += step
        dn[i] -= step
        H[:, i] = (_nll_gradient(design, X, y, up, free) - _nll_gradient(design, X, y, dn, free)) / (2 * step)
    return 0.5 * (H + H.T)


def fit_lmm_arrays(X, y, groups, names, fix_sigma_b_zero=False) -> LmmFit:
    """Maximum-likelihood random-intercept model with profiled fixed effects.

    The covariance parameters are optimised on the log scale; fixed effects
    are their GLS solution at each step.  Standard errors are the
    fixed-effect block of the inverse observed information over all
    parameters.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    bad = aliased_columns(X, names)
    if bad:
        raise RankError(f"design is rank deficient; aliased columns: {bad}", bad)
    design = RandomEffectsDesign.from_ids(groups)
    ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    lse0 = 0.5 * np.log(max(np.mean((y - X @ ols) ** 2), 1e-12))
    fixed_zero = fix_sigma_b_zero or design.n_clusters < 2
    converged = True
    if fixed_zero:
        res = optimize.minimize_scalar(
            lambda s: _profile(design, X, y, -np.inf, s)[0],
            bounds=(lse0 - 10, lse0 + 5), method="bounded", options={"xatol": 1e-10})
        lsb, lse = -np.inf, float(res.x)
    else:
        best = None
        for start in (lse0, lse0 - 2.0):
            res = optimize.minimize(
                lambda v: _profile(design, X, y, v[0], v[1])[0],
                x0=np.array([start, lse0]),
                method="L-BFGS-B",
                bounds=[(lse0 + LOG_SIGMA_FLOOR, lse0 + 6), (lse0 - 10, lse0 + 5)],
            )
            if best is None or res.fun < best.fun:
                best = res
        lsb, lse = best.x
        converged = bool(best.success)
        if lsb <= lse0 + LOG_SIGMA_FLOOR + 1e-6:
            lsb = -np.inf
    nll, beta, XtVX, params = _profile(design, X, y, lsb, lse)
    info = observed_information(design, X, y, beta, lsb, lse)
    cov = np.linalg.inv(info)[: X.shape[1], : X.shape[1]]
    se = np.sqrt(np.diag(cov))
    z = beta / se
    p = 2 * sst.norm.sf(np.abs(z))
    # the structured profile and the differentiable loss must agree
    check = marginal_nll(X @ beta, y, design, params)
    b = blup_predict(design, params, y - X @ beta)
    fitted = X @ beta + b.b[design.index, 0]
    return LmmFit(
        list(names), beta, se, z, p,
        float(params.sigma_b[0] ** 2), float(params.sigma_e ** 2),
        y - fitted, fitted, float(nll), converged,
        extra={"nll_check": float(check), "cov": cov, "gls_cov": np.linalg.inv(XtVX),
               "random_effects": b},
    )


def fit_lmm(data, predictor="MNF") -> LmmFit:
    """Random-intercept model of total fear on a muscle predictor.

    Fixed effects: intercept, predictor, lead, intervals 2-4 (interval 1 is
    the reference), experience and the predictor x lead interaction.
    """
    X, y, groups, names = lmm_design(data, predictor)
    if len(np.unique(groups)) < 2:
        raise ContractError("fit_lmm needs at least 2 participants")
    return fit_lmm_arrays(X, y, groups, names)


# -- diagnostics -----------------------------------------------------------------

def goldfeld_quandt(residuals, fitted, drop=0.2):
    """Variance ratio of the upper over the lower fitted-value segment.

    Observations are ordered by fitted value and the middle ``drop`` share
    is discarded.  Returns ``(GQ, p)`` with p from the upper F tail.
    """
    r = np.asarray(residuals, dtype=float)
    order = np.argsort(np.asarray(fitted, dtype=float), kind="stable")
    n = r.size
    n_side = (n - int(round(drop * n))) // 2
    if n_side < 3:
        raise ContractError(f"too few observations ({n}) for the Goldfeld-Quandt test")
    low, high = r[order[:n_side]], r[order[-n_side:]]
    gq = high.var(ddof=1) / low.var(ddof=1)
    return float(gq), float(sst.f.sf(gq, n_side - 1, n_side - 1))


def qq_points(residuals):
    """Sorted residuals against standard-normal plotting positions."""
    r = np.sort(np.asarray(residuals, dtype=float))
    n = r.size
    theo = sst.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return pd.DataFrame({"theoretical": theo, "sample": r})


def diagnostics(fit: LmmFit, drop=0.2) -> dict:
    n = len(fit.residuals)
    if n < 10:
        raise ContractError(f"diagnostics need at least 10 residuals, got {n}")
    gq, p = goldfeld_quandt(fit.residuals, fit.fitted, drop)
    return {
        "qq": qq_points(fit.residuals),
        "resid_vs_fitted": pd.DataFrame({"fitted": fit.fitted, "residual": fit.residuals}),
        "goldfeld_quandt": (gq, p),
    }


# -- interval aggregation ----------------------------------------------------------

def interval_table(features: dict, manifest: pd.DataFrame) -> pd.DataFrame:
    """Mean windowed features per (recording, interval) joined with the scores."""
    rows = []
    for rid, group in manifest.groupby("recording_id", sort=True):
        if rid not in features:
            continue
        group = group.sort_values("interval")
        feats = features[rid]
        iv = assign_intervals(feats["t_seconds"], group["t_end"].to_numpy())
        for rec in group.itertuples(index=False):
            sel = feats[iv == rec.interval]
            rows.append({
                "participant_id": rec.participant_id,
                "style": 1 if rec.style == "lead" else 0,
                "interval": rec.interval,
                "experience_years": rec.experience_years,
                "mnf_mean": sel["mnf_hz"].mean(),
                "iemg_mean": sel["iemg"].mean(),
                "hr_mean": sel["hr_bpm"].mean(),
                **{c: getattr(rec, c) for c in SCORE_COLUMNS},
            })
    df = pd.DataFrame(rows)
    df["total_fear"] = df[FEAR_ITEMS].sum(axis=1)
    return df
