"""Linear, MLP and GRU regressors with a time-series and a metadata branch.

Every architecture consumes a :class:`WindowBatch` and returns one
prediction per window.  Parameters are stored as plain arrays in
:class:`NetworkParams` and bound to a fresh :class:`~mixednet.autodiff.Graph`
for each forward pass.  Weight names start with ``W`` or ``U``; biases start
with ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ConfigError, DimensionError

ARCHITECTURES = ("linear", "mlp", "gru")
WINDOW_LENGTH = 30
DROPOUT_RATE = 0.5


@dataclass
class WindowBatch:
    """A stack of model inputs.

    Attributes
    ----------
    series : ndarray, shape (B, T, F)
        Standardized time-series features.
    meta : ndarray, shape (B, M)
        Encoded participant metadata.
    targets : ndarray, shape (B,)
    cluster_ids : ndarray, shape (B,)
        Participant id for each window.
    """

    series: np.ndarray
    meta: np.ndarray
    targets: np.ndarray
    cluster_ids: np.ndarray
    window_length: int = WINDOW_LENGTH

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)
        self.meta = np.asarray(self.meta, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        self.cluster_ids = np.asarray(self.cluster_ids).reshape(-1)
        if self.series.ndim != 3:
            raise DimensionError(f"series must be (batch, time, features), got {self.series.shape}")
        if self.series.shape[1] != self.window_length:
            raise DimensionError(
                f"series has {self.series.shape[1]} time steps, expected {self.window_length}"
            )
        if self.meta.ndim != 2:
            raise DimensionError(f"meta must be (batch, features), got {self.meta.shape}")
        b = self.series.shape[0]
        if self.meta.shape[0] != b or self.targets.shape[0] != b or self.cluster_ids.shape[0] != b:
            raise DimensionError(
                "batch sizes differ: series %d, meta %d, targets %d, cluster_ids %d"
                % (b, self.meta.shape[0], self.targets.shape[0], self.cluster_ids.shape[0])
            )

    def __len__(self):
        return self.series.shape[0]

    @property
    def n_features(self):
        return self.series.shape[2]

    @property
    def n_meta(self):
        return self.meta.shape[1]

    def subset(self, index) -> "WindowBatch":
        return WindowBatch(
            self.series[index],
            self.meta[index],
            self.targets[index],
            self.cluster_ids[index],
            self.window_length,
        )

    @staticmethod
    def concat(batches) -> "WindowBatch":
        batches = list(batches)
        return WindowBatch(
            np.concatenate([b.series for b in batches]),
            np.concatenate([b.meta for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.cluster_ids for b in batches]),
            batches[0].window_length,
        )


@dataclass
class NetworkParams:
    arch: str
    n_features: int
    n_meta: int
    hidden: int
    meta_hidden: int
    seed: int
    arrays: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.arch,
            self.n_features,
            self.n_meta,
            self.hidden,
            self.meta_hidden,
            self.seed,
            {k: v.copy() for k, v in self.arrays.items()},
        )

    def weight_names(self):
        return [k for k in self.arrays if k[0] in "WU"]

    def bind(self, graph: Graph, requires_grad=True) -> dict:
        return {
            k: graph.leaf(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()
        }


def _layer_shapes(arch, F, M, H, Hm):
    if arch == "linear":
        return [("W", (F + M, 1)), ("c", (1, 1))]
    meta = [("W_meta", (M, Hm)), ("c_meta", (1, Hm))]
    if arch == "mlp":
        return [
            ("W_step", (F, H)),
            ("c_step", (1, H)),
            *meta,
            ("W_merge", (H + Hm, H)),
            ("c_merge", (1, H)),
            ("W_out", (H, 1)),
            ("c_out", (1, 1)),
        ]
    if arch == "gru":
        cell = []
        for gate in ("z", "r", "h"):
            cell += [(f"W_{gate}", (F, H)), (f"U_{gate}", (H, H)), (f"c_{gate}", (1, H))]
        return [
            *cell,
            *meta,
            ("W_merge", (H + Hm, H)),
            ("c_merge", (1, H)),
            ("W_dense", (H, H)),
            ("c_dense", (1, H)),
            ("W_out", (H, 1)),
            ("c_out", (1, 1)),
        ]
    raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def build_params(arch, n_features, n_meta, hidden=32, seed=0, meta_hidden=8) -> NetworkParams:
    """Initialise weights uniformly in +-1/sqrt(fan_in); biases start at zero."""
    for name, v in (("n_features", n_features), ("n_meta", n_meta), ("hidden", hidden),
                    ("meta_hidden", meta_hidden)):
        if int(v) <= 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(arch, n_features, n_meta, hidden, meta_hidden):
        if name[0] in "WU":
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(arch, n_features, n_meta, hidden, meta_hidden, seed, arrays)


def _check_dims(batch: WindowBatch, params: NetworkParams):
    if batch.n_features != params.n_features or batch.n_meta != params.n_meta:
        raise DimensionError(
            f"batch has {batch.n_features} series / {batch.n_meta} meta features, "
            f"params were built for {params.n_features} / {params.n_meta}"
        )


def _dense(g, x, w, c):
    return g.add(g.matmul(x, w), c)


def _linear(g: Graph, w, batch: WindowBatch, training=False, rng=None) -> Tensor:
    x = g.constant(np.hstack([batch.series.mean(axis=1), batch.meta]))
    return _dense(g, x, w["W"], w["c"])


def _mlp(g: Graph, w, batch: WindowBatch, training=False, rng=None) -> Tensor:
    B, T, F = batch.series.shape
    steps = g.constant(batch.series.reshape(B * T, F))
    per_step = g.relu(_dense(g, steps, w["W_step"], w["c_step"]))
    # shared step layer, then average the T rows belonging to each window
    averager = np.kron(np.eye(B), np.full((1, T), 1.0 / T))
    pooled = g.matmul(g.constant(averager), per_step)
    meta = g.relu(_dense(g, g.constant(batch.meta), w["W_meta"], w["c_meta"]))
    merged = g.relu(_dense(g, g.concat_cols([pooled, meta]), w["W_merge"], w["c_merge"]))
    merged = g.dropout(merged, DROPOUT_RATE, training, rng)
    return _dense(g, merged, w["W_out"], w["c_out"])


def gru_final_state(g: Graph, w, series: np.ndarray) -> Tensor:
    """Unroll the gated recurrent cell over the time axis from a zero state."""
    B, T, _ = series.shape
    H = w["U_z"].shape[0]
    h = g.constant(np.zeros((B, H)))
    for t in range(T):
        x = g.constant(series[:, t, :])
        z = g.sigmoid(g.add(g.add(g.matmul(x, w["W_z"]), g.matmul(h, w["U_z"])), w["c_z"]))
        r = g.sigmoid(g.add(g.add(g.matmul(x, w["W_r"]), g.matmul(h, w["U_r"])), w["c_r"]))
        cand = g.tanh(
            g.add(g.add(g.matmul(x, w["W_h"]), g.matmul(g.mul(r, h), w["U_h"])), w["c_h"])
        )
        # h_t = (1 - z) * h + z * cand
        h = g.add(h, g.mul(z, g.sub(cand, h)))
    return h


def _gru(g: Graph, w, batch: WindowBatch, training=False, rng=None) -> Tensor:
    h = gru_final_state(g, w, batch.series)
    meta = g.relu(_dense(g, g.constant(batch.meta), w["W_meta"], w["c_meta"]))
    merged = g.relu(_dense(g, g.concat_cols([h, meta]), w["W_merge"], w["c_merge"]))
    dense = g.relu(_dense(g, merged, w["W_dense"], w["c_dense"]))
    dense = g.dropout(dense, DROPOUT_RATE, training, rng)
    return _dense(g, dense, w["W_out"], w["c_out"])


_FORWARD = {"linear": _linear, "mlp": _mlp, "gru": _gru}


def forward_graph(g: Graph, bound: dict, arch: str, batch: WindowBatch, training=False,
                  rng=None) -> Tensor:
    """Forward pass on a graph with parameters already bound as leaves."""
    if arch not in _FORWARD:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    if training and arch != "linear" and rng is None:
        raise ConfigError("training-mode forward needs an rng for dropout")
    return _FORWARD[arch](g, bound, batch, training, rng)


def predict(params: NetworkParams, batch: WindowBatch, training=False, rng=None) -> np.ndarray:
    """Predictions as a (B, 1) array, without keeping the graph."""
    _check_dims(batch, params)
    g = Graph()
    out = forward_graph(g, params.bind(g, requires_grad=False), params.arch, batch, training, rng)
    return out.values


def linear_forward(batch, params):
    return predict(params, batch)


def mlp_forward(batch, params, training=False, rng=None):
    return predict(params, batch, training, rng)


def gru_forward(batch, params, training=False, rng=None):
    return predict(params, batch, training, rng)


def parameter_count(arch, n_features, n_meta, hidden=32, meta_hidden=8) -> int:
    """Closed-form parameter count for an architecture."""
    F, M, H, Hm = n_features, n_meta, hidden, meta_hidden
    if arch == "linear":
        return F + M + 1
    meta = M * Hm + Hm
    if arch == "mlp":
        return (F * H + H) + meta + ((H + Hm) * H + H) + (H + 1)
    if arch == "gru":
        return 3 * (H * F + H * H + H) + meta + ((H + Hm) * H + H) + (H * H + H) + (H + 1)
    raise ConfigError(f"unknown architecture {arch!r}")
