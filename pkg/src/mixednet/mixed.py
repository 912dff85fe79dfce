"""Random-effects machinery for clustered regression.

The response is modelled as ``y = f(X) + Z b + e`` with per-cluster effects
``b_j ~ N(0, D)`` and residual ``e ~ N(0, sigma_e^2 I)``.  The marginal
covariance ``V = Z D Z' + sigma_e^2 I`` is block diagonal over clusters, and
each block is inverted with the Woodbury identity::

    V_j^-1 = (I - Z_j K_j Z_j') / sigma_e^2,   K_j = (sigma_e^2 I + D G_j)^-1 D
    log|V_j| = (n_j - q) log sigma_e^2 + log|sigma_e^2 I + D G_j|

where ``G_j = Z_j' Z_j``.  For a random intercept (q = 1) this is the
Sherman-Morrison form with ``K_j = sigma_b^2 / (sigma_e^2 + n_j sigma_b^2)``.
No ``n x n`` matrix is ever formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError

MODES = ("intercept", "slopes")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class RandomEffectsDesign:
    """Cluster structure of ``n`` observations.

    ``covariates`` has one column per random effect: a column of ones for the
    intercept and, in slopes mode, the covariate carrying the random slope.
    """

    clusters: np.ndarray
    index: np.ndarray
    covariates: np.ndarray
    mode: str = "intercept"

    @classmethod
    def from_ids(cls, cluster_ids, mode="intercept", slope_covariate=None, clusters=None):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        ids = np.asarray(cluster_ids).reshape(-1)
        if ids.size == 0:
            raise ContractError("design needs at least one observation")
        if clusters is None:
            clusters = np.unique(ids)
        else:
            clusters = np.asarray(clusters)
        lookup = {c: i for i, c in enumerate(clusters.tolist())}
        try:
            index = np.array([lookup[c] for c in ids.tolist()], dtype=int)
        except KeyError as exc:
            raise ContractError(f"observation refers to unknown cluster {exc.args[0]!r}") from None
        counts = np.bincount(index, minlength=len(clusters))
        if np.any(counts == 0):
            empty = clusters[counts == 0].tolist()
            raise ContractError(f"clusters without observations: {empty}")
        cols = [np.ones(len(ids))]
        if mode == "slopes":
            if slope_covariate is None:
                raise ConfigError("slopes mode needs a slope covariate")
            x = np.asarray(slope_covariate, dtype=float).reshape(-1)
            if x.shape[0] != ids.shape[0]:
                raise DimensionError("slope covariate length differs from cluster ids")
            cols.append(x)
        return cls(clusters, index, np.column_stack(cols), mode)

    @property
    def n(self) -> int:
        return self.index.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.index, minlength=self.n_clusters)

    def indicator(self) -> np.ndarray:
        """Dense ``n x J`` membership matrix."""
        out = np.zeros((self.n, self.n_clusters))
        out[np.arange(self.n), self.index] = 1.0
        return out

    def Z(self) -> np.ndarray:
        """Materialised ``n x (J q)`` random-effects design, cluster-major columns."""
        out = np.zeros((self.n, self.n_clusters * self.q))
        for k in range(self.q):
            out[np.arange(self.n), self.index * self.q + k] = self.covariates[:, k]
        return out

    def cross_products(self) -> np.ndarray:
        """``G_j = Z_j' Z_j`` for every cluster, shape (J, q, q)."""
        outer = self.covariates[:, :, None] * self.covariates[:, None, :]
        return _segment_sum(self.index, self.n_clusters, outer)


def _segment_sum(index, n_segments, values):
    out = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


@dataclass
class CovarianceParams:
    """Unconstrained covariance parameters.

    Standard deviations are stored on the log scale and correlations through
    ``rho = tanh(rho_raw)``, so any real vector maps to a valid covariance.
    """

    log_sigma_b: np.ndarray
    rho_raw: np.ndarray
    log_sigma_e: float

    def __post_init__(self):
        self.log_sigma_b = np.atleast_1d(np.asarray(self.log_sigma_b, dtype=float))
        self.rho_raw = np.atleast_1d(np.asarray(self.rho_raw, dtype=float))
        self.log_sigma_e = float(self.log_sigma_e)
        q = self.log_sigma_b.size
        if self.rho_raw.size != q * (q - 1) // 2:
            raise DimensionError(f"{q} random effects need {q * (q - 1) // 2} correlations")

    @classmethod
    def from_values(cls, sigma_b, sigma_e, rho=()):
        sigma_b = np.atleast_1d(np.asarray(sigma_b, dtype=float))
        with np.errstate(divide="ignore"):
            return cls(np.log(sigma_b), np.arctanh(np.asarray(rho, dtype=float)), np.log(sigma_e))

    @classmethod
    def initial(cls, mode="intercept"):
        q = 1 if mode == "intercept" else 2
        return cls(np.zeros(q), np.zeros(q * (q - 1) // 2), 0.0)

    @property
    def q(self) -> int:
        return self.log_sigma_b.size

    @property
    def sigma_b(self) -> np.ndarray:
        return np.exp(self.log_sigma_b)

    @property
    def sigma_e(self) -> float:
        return float(np.exp(self.log_sigma_e))

    @property
    def rho(self) -> np.ndarray:
        return np.tanh(self.rho_raw)

    def copy(self):
        return CovarianceParams(self.log_sigma_b.copy(), self.rho_raw.copy(), self.log_sigma_e)

    def as_arrays(self) -> dict:
        """Parameter arrays keyed as in :func:`bind_covariance`."""
        out = {
            "log_sigma_b": self.log_sigma_b.reshape(-1, 1).copy(),
            "log_sigma_e": np.array([[self.log_sigma_e]]),
        }
        if self.rho_raw.size:
            out["rho_raw"] = self.rho_raw.reshape(-1, 1).copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict):
        return cls(
            arrays["log_sigma_b"].reshape(-1),
            arrays.get("rho_raw", np.zeros(0)).reshape(-1),
            float(np.asarray(arrays["log_sigma_e"]).reshape(-1)[0]),
        )


@dataclass
class RandomEffectsEstimate:
    """Per-cluster effects ``b`` (rows follow ``clusters``)."""

    clusters: np.ndarray
    b: np.ndarray

    def lookup(self, cluster_ids) -> np.ndarray:
        """Effects for each id; clusters never seen get zeros."""
        ids = np.asarray(cluster_ids).reshape(-1)
        pos = {c: i for i, c in enumerate(np.asarray(self.clusters).tolist())}
        out = np.zeros((ids.shape[0], self.b.shape[1]))
        for i, c in enumerate(ids.tolist()):
            j = pos.get(c)
            if j is not None:
                out[i] = self.b[j]
        return out

    @classmethod
    def zeros(cls, clusters, q=1):
        return cls(np.asarray(clusters), np.zeros((len(clusters), q)))


def assemble_D(params: CovarianceParams, mode="intercept") -> np.ndarray:
    """Covariance of one cluster's effect vector."""
    q = 1 if mode == "intercept" else 2
    if params.q != q:
        raise DimensionError(f"{mode} mode needs {q} standard deviations, got {params.q}")
    sb = params.sigma_b
    if q == 1:
        return np.array([[sb[0] ** 2]])
    off = params.rho[0] * sb[0] * sb[1]
    return np.array([[sb[0] ** 2, off], [off, sb[1] ** 2]])


def _woodbury_factors(design: RandomEffectsDesign, params: CovarianceParams):
    D = assemble_D(params, design.mode)
    se2 = params.sigma_e ** 2
    G = design.cross_products()
    M = se2 * np.eye(design.q)[None] + D[None] @ G
    K = np.linalg.solve(M, np.broadcast_to(D, M.shape))
    return K, M, se2


def structured_V_inverse_apply(design: RandomEffectsDesign, params: CovarianceParams, r):
    """Return ``(V^-1 r, log|V|)`` using per-cluster Woodbury blocks.

    ``r`` may be a vector of length n or an ``n x k`` matrix.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[0] != design.n:
        raise DimensionError(f"residual has {r.shape[0]} rows, design has {design.n}")
    vec = r.ndim == 1
    R = r.reshape(design.n, -1)
    K, M, se2 = _woodbury_factors(design, params)
    zc = design.covariates
    u = _segment_sum(design.index, design.n_clusters, zc[:, :, None] * R[:, None, :])
    w = K @ u  # (J, q, k)
    fitted = np.einsum("nq,nqk->nk", zc, w[design.index])
    out = (R - fitted) / se2
    _, logdet_m = np.linalg.slogdet(M)
    logdet = (design.n - design.n_clusters * design.q) * np.log(se2) + logdet_m.sum()
    return (out.reshape(-1) if vec else out), float(logdet)


def blup_predict(design: RandomEffectsDesign, params: CovarianceParams, residuals
                 ) -> RandomEffectsEstimate:
    """Best linear unbiased predictor ``b_j = D Z_j' V_j^-1 r_j``.

    By the push-through identity this equals ``K_j Z_j' r_j``.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    if r.shape[0] != design.n:
        raise DimensionError(f"residual has {r.shape[0]} rows, design has {design.n}")
    K, _, _ = _woodbury_factors(design, params)
    u = _segment_sum(design.index, design.n_clusters, design.covariates * r[:, None])
    b = np.einsum("jab,jb->ja", K, u)
    return RandomEffectsEstimate(np.asarray(design.clusters), b)


def random_effect_layer(predictions, cluster_ids, estimate: RandomEffectsEstimate,
                        mode="intercept", slope_covariate=None) -> np.ndarray:
    """Add each observation's cluster effect ``z_i' b_j`` to the predictions."""
    pred = np.asarray(predictions, dtype=float)
    b = estimate.lookup(cluster_ids)
    shift = b[:, 0].copy()
    if mode == "slopes":
        if slope_covariate is None:
            raise ConfigError("slopes mode needs a slope covariate")
        shift += b[:, 1] * np.asarray(slope_covariate, dtype=float).reshape(-1)
    return pred + shift.reshape(pred.shape)


# -- differentiable marginal likelihood ---------------------------------------

def bind_covariance(graph: Graph, params: CovarianceParams, requires_grad=True) -> dict:
    return {k: graph.leaf(v, requires_grad=requires_grad, name=k)
            for k, v in params.as_arrays().items()}


def _quad_and_logdet(g: Graph, r: Tensor, design: RandomEffectsDesign, psi: dict):
    """``r' V^-1 r`` and ``log|V|`` built from elementwise ops on J x 1 columns."""
    n, J = design.n, design.n_clusters
    G = design.cross_products()
    lse = psi["log_sigma_e"]
    se2 = g.exp(g.scalar_mul(lse, 2.0))
    rr = g.sum(g.square(r))
    lsb = psi["log_sigma_b"]
    ind = design.indicator()
    if design.q == 1:
        sb2 = g.exp(g.scalar_mul(lsb, 2.0))
        s = g.matmul(g.constant(ind.T), r)
        a = g.add(se2, g.mul(g.constant(G[:, 0, 0]), sb2))
        shrink = g.sum(g.div(g.mul(sb2, g.square(s)), a))
        logdet_m = g.sum(g.log(a))
    else:
        s0 = g.exp(g.slice_rows(lsb, 0, 1))
        s1 = g.exp(g.slice_rows(lsb, 1, 2))
        rho = g.tanh(psi["rho_raw"])
        d00, d11 = g.square(s0), g.square(s1)
        d01 = g.mul(rho, g.mul(s0, s1))
        g00, g01, g11 = (g.constant(G[:, i, j]) for i, j in ((0, 0), (0, 1), (1, 1)))
        m00 = g.add(se2, g.add(g.mul(d00, g00), g.mul(d01, g01)))
        m01 = g.add(g.mul(d00, g01), g.mul(d01, g11))
        m10 = g.add(g.mul(d01, g00), g.mul(d11, g01))
        m11 = g.add(se2, g.add(g.mul(d01, g01), g.mul(d11, g11)))
        det = g.sub(g.mul(m00, m11), g.mul(m01, m10))
        u0 = g.matmul(g.constant(ind.T), r)
        u1 = g.matmul(g.constant((ind * design.covariates[:, 1:2]).T), r)
        # K = M^-1 D, adj(M) = [[m11, -m01], [-m10, m00]]
        k00 = g.sub(g.mul(m11, d00), g.mul(m01, d01))
        k01 = g.sub(g.mul(m11, d01), g.mul(m01, d11))
        k10 = g.sub(g.mul(m00, d01), g.mul(m10, d00))
        k11 = g.sub(g.mul(m00, d11), g.mul(m10, d01))
        w0 = g.add(g.mul(k00, u0), g.mul(k01, u1))
        w1 = g.add(g.mul(k10, u0), g.mul(k11, u1))
        uKu = g.div(g.add(g.mul(u0, w0), g.mul(u1, w1)), det)
        shrink = g.sum(uKu)
        logdet_m = g.sum(g.log(det))
    quad = g.div(g.sub(rr, shrink), se2)
    logdet = g.add(g.scalar_mul(lse, 2.0 * (n - J * design.q)), logdet_m)
    return quad, logdet


def marginal_nll(predictions, targets, design: RandomEffectsDesign, params,
                 graph: Graph | None = None, batch_label=None):
    """Negative log marginal likelihood of ``targets`` given ``predictions``.

    ``0.5 r' V^-1 r + 0.5 log|V| + (n/2) log 2 pi`` with ``r = y - f``.

    Parameters
    ----------
    predictions : Tensor or array
        ``f(X, theta)``; a Tensor keeps the result differentiable.
    params : CovarianceParams or dict of Tensor
        A dict from :func:`bind_covariance` makes the loss differentiable in
        the covariance parameters.

    Returns
    -------
    Tensor (1 x 1) when a graph is involved, otherwise float.
    """
    if isinstance(predictions, Tensor):
        g = predictions.graph
    elif isinstance(params, dict):
        g = next(iter(params.values())).graph
    else:
        g = graph or Graph()
    as_float = not isinstance(predictions, Tensor) and not isinstance(params, dict)
    f = predictions if isinstance(predictions, Tensor) else g.constant(
        np.asarray(predictions, dtype=float).reshape(-1, 1))
    y = np.asarray(targets, dtype=float).reshape(-1, 1)
    if f.shape != y.shape or y.shape[0] != design.n:
        raise DimensionError(
            f"predictions {f.shape}, targets {y.shape} and design (n={design.n}) disagree"
        )
    if not np.all(np.isfinite(f.values)):
        where = f" in batch {batch_label}" if batch_label is not None else ""
        raise NumericError(f"non-finite predictions{where}")
    psi = params if isinstance(params, dict) else bind_covariance(g, params, requires_grad=False)
    r = g.sub(g.constant(y), f)
    quad, logdet = _quad_and_logdet(g, r, design, psi)
    loss = g.add(g.scalar_mul(g.add(quad, logdet), 0.5), g.constant(0.5 * design.n * LOG_2PI))
    return float(loss.values[0, 0]) if as_float else loss


def gaussian_nll(predictions, targets, sigma_e) -> float:
    """Independent-normal NLL with common variance ``sigma_e^2``."""
    r = np.asarray(targets, dtype=float).reshape(-1) - np.asarray(predictions, dtype=float).reshape(-1)
    n = r.size
    return float(0.5 * np.sum(r ** 2) / sigma_e ** 2 + n * np.log(sigma_e) + 0.5 * n * LOG_2PI)
