"""Dataset assembly, trial-level splits, training and multi-seed evaluation."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .autodiff import Graph
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .mixed import (
    CovarianceParams, RandomEffectsDesign, RandomEffectsEstimate,
    blup_predict, marginal_nll, random_effect_layer,
)
from .models import (
    ARCHITECTURES, WINDOW_LENGTH, NetworkParams, WindowBatch, build_params, forward_graph,
    predict,
)
from .signal import MODEL_FEATURES, Standardizer, make_windows, read_features, read_manifest

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# blup: effects predicted from residuals under the marginal likelihood;
# map: effects as free parameters with a fixed Gaussian prior
EFFECTS_MODES = ("blup", "map")


@dataclass
class RunConfig:
    arch: str = "gru"
    random_effects: bool = True
    features: list = field(default_factory=lambda: list(MODEL_FEATURES))
    learning_rate: float = 1e-4
    l2: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    seeds: list = field(default_factory=lambda: list(range(10)))
    split_fractions: tuple = (0.70, 0.15, 0.15)
    split_seed: int = 0
    hidden: int = 32
    meta_hidden: int = 8
    window_length: int = WINDOW_LENGTH
    effects_mode: str = "blup"
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.features = list(self.features)
        self.seeds = [int(s) for s in self.seeds]
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.validate()

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0:
            raise ConfigError(f"split_fractions must be three non-negative numbers, got {self.split_fractions}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must sum to 1, got {sum(self.split_fractions)}")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigError(f"need 0 <= patience < max_epochs, got {self.patience}, {self.max_epochs}")
        for name in ("learning_rate", "batch_size", "max_epochs", "hidden", "meta_hidden",
                     "window_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.l2 < 0 or self.min_delta < 0:
            raise ConfigError("l2 and min_delta must be non-negative")
        if not self.features:
            raise ConfigError("feature list is empty")
        if self.effects_mode not in EFFECTS_MODES:
            raise ConfigError(f"effects_mode must be one of {EFFECTS_MODES}, got {self.effects_mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- windows -------------------------------------------------------------------

@dataclass
class WindowDataset:
    """All windows of a study, unstandardized.

    ``age`` and ``gender`` are the raw participant metadata of each window;
    ``trials`` names the recording each window came from.
    """

    series: np.ndarray
    age: np.ndarray
    gender: np.ndarray
    targets: np.ndarray
    participants: np.ndarray
    trials: np.ndarray
    styles: np.ndarray
    feature_names: list

    def __len__(self):
        return len(self.targets)

    def subset(self, index) -> "WindowDataset":
        return WindowDataset(self.series[index], self.age[index], self.gender[index],
                             self.targets[index],
                             self.participants[index], self.trials[index], self.styles[index],
                             self.feature_names)


def build_window_dataset(features: dict, manifest: pd.DataFrame, feature_names=MODEL_FEATURES,
                         window_length=WINDOW_LENGTH) -> WindowDataset:
    """Window every recording in ``features`` and attach interval targets.

    Targets are the total fear score (sum of the three fear items) of the
    interval containing each window's center.
    """
    names = list(feature_names)
    parts = []
    for rid in sorted(features):
        rows = manifest[manifest["recording_id"] == rid].sort_values("interval")
        if rows.empty:
            raise ContractError(f"recording {rid} has features but no manifest rows")
        totals = rows[["anxiety", "fear_falling", "fear_heights"]].sum(axis=1).to_numpy()
        series, targets, _, _ = make_windows(features[rid], rows["t_end"].to_numpy(), totals,
                                             names, window_length)
        first = rows.iloc[0]
        if len(targets) == 0:
            warnings.warn(f"recording {rid} yields no complete windows; excluded", stacklevel=2)
            continue
        n = len(targets)
        parts.append((series, np.full(n, float(first["age"])),
                      np.full(n, str(first["gender"]), dtype=object), targets,
                      np.full(n, int(first["participant_id"])), np.full(n, rid, dtype=object),
                      np.full(n, str(first["style"]), dtype=object)))
    if not parts:
        raise ContractError("no windows could be built from the data")
    cols = list(zip(*parts))
    return WindowDataset(*(np.concatenate(c) for c in cols), names)


def load_window_dataset(data_dir, feature_names=MODEL_FEATURES, window_length=WINDOW_LENGTH):
    return build_window_dataset(read_features(data_dir), read_manifest(data_dir),
                                feature_names, window_length)


# -- split -----------------------------------------------------------------------

def split_dataset(data: WindowDataset, seed=0, fractions=(0.70, 0.15, 0.15)) -> dict:
    """Trial-level split with per-participant anchoring.

    One randomly chosen trial of every participant goes to train.  The
    remaining trials are shuffled and each is given to the split furthest
    below its target window count.  Returns window index arrays per split.
    """
    rng = np.random.default_rng(seed)
    trial_ids = np.asarray(data.trials)
    trials = pd.DataFrame({"trial": trial_ids, "participant": data.participants})
    sizes = trials.groupby("trial").size()
    owner = trials.groupby("trial")["participant"].first()
    assigned = {}
    for pid in sorted(owner.unique()):
        own = sorted(owner[owner == pid].index)
        assigned[own[rng.integers(len(own))]] = "train"
    rest = [t for t in sorted(sizes.index) if t not in assigned]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    total = len(trial_ids)
    targets = dict(zip(SPLITS, np.asarray(fractions) * total))
    counts = {s: 0 for s in SPLITS}
    for t in assigned:
        counts["train"] += sizes[t]
    for t in rest:
        deficit = {s: targets[s] - counts[s] for s in SPLITS}
        best = max(SPLITS, key=lambda s: (deficit[s], -SPLITS.index(s)))
        assigned[t] = best
        counts[best] += sizes[t]
    labels = np.array([assigned[t] for t in trial_ids])
    out = {s: np.flatnonzero(labels == s) for s in SPLITS}
    check_disjoint(out)
    return out


def check_disjoint(split: dict):
    seen = set()
    for s in SPLITS:
        idx = set(np.asarray(split[s]).tolist())
        if seen & idx:
            raise ContractError("train/val/test windows overlap")
        seen |= idx


# -- preprocessing ---------------------------------------------------------------

@dataclass
class Preprocessor:
    """Training-set statistics for inputs and targets.

    Series features, age and targets are standardized; gender is one-hot
    encoded over the categories seen in training (unseen ones encode as
    all zeros).
    """

    series: Standardizer
    age: Standardizer
    target: Standardizer
    genders: list

    @classmethod
    def fit(cls, data: WindowDataset) -> "Preprocessor":
        return cls(Standardizer.fit(data.series), Standardizer.fit(data.age.reshape(-1, 1)),
                   Standardizer.fit(data.targets.reshape(-1, 1)),
                   sorted(set(map(str, data.gender))))

    @property
    def n_meta(self) -> int:
        return 1 + len(self.genders)

    def meta(self, data: WindowDataset) -> np.ndarray:
        onehot = (np.asarray(data.gender, dtype=str)[:, None] == np.array(self.genders)[None, :])
        return np.hstack([self.age.transform(data.age.reshape(-1, 1)), onehot.astype(float)])

    def batch(self, data: WindowDataset, window_length=WINDOW_LENGTH) -> WindowBatch:
        y = self.target.transform(data.targets.reshape(-1, 1)).reshape(-1)
        return WindowBatch(self.series.transform(data.series), self.meta(data), y,
                           data.participants, window_length)

    def to_arrays(self) -> dict:
        return {f"{k}_{p}": np.atleast_1d(getattr(getattr(self, k), p))
                for k in ("series", "age", "target") for p in ("mean", "sd")}

    @classmethod
    def from_arrays(cls, a: dict, genders) -> "Preprocessor":
        return cls(*(Standardizer(a[f"{k}_mean"], a[f"{k}_sd"]) for k in ("series", "age", "target")),
                   list(genders))


# -- optimisation ------------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainedModel:
    params: NetworkParams
    preprocessor: Preprocessor
    random_effects: bool
    covariance: CovarianceParams | None = None
    effects: RandomEffectsEstimate | None = None
    curves: pd.DataFrame | None = None
    best_epoch: int = 0
    feature_names: list = field(default_factory=lambda: list(MODEL_FEATURES))
    window_length: int = WINDOW_LENGTH

    def predict(self, data: WindowDataset) -> np.ndarray:
        """Predictions on the original target scale, cluster effects included."""
        batch = self.preprocessor.batch(data, self.window_length)
        z = predict(self.params, batch)
        if self.random_effects and self.effects is not None:
            z = random_effect_layer(z, batch.cluster_ids, self.effects)
        return self.preprocessor.target.inverse(z).reshape(-1)


def _batch_stats(batch: WindowBatch) -> dict:
    stat = lambda x: {"mean": float(np.nanmean(x)), "sd": float(np.nanstd(x)),
                      "min": float(np.nanmin(x)), "max": float(np.nanmax(x)),
                      "n_nonfinite": int(np.sum(~np.isfinite(x)))}
    return {"size": len(batch), "series": stat(batch.series), "meta": stat(batch.meta),
            "targets": stat(batch.targets)}


def _batches(batch: WindowBatch, size, rng, clustered):
    """Index arrays for one epoch.

    With ``clustered`` the windows are grouped by participant (participants in
    random order) before chunking, so batches contain few, well-filled
    clusters for the marginal likelihood.
    """
    n = len(batch)
    if clustered:
        ids = batch.cluster_ids
        uniq = np.unique(ids)
        order = np.concatenate([rng.permutation(np.flatnonzero(ids == c))
                                for c in uniq[rng.permutation(len(uniq))]])
    else:
        order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _free_effects(g, bound, batch, clusters):
    """Per-window free intercepts gathered from the ``b_free`` table."""
    pos = {c: i for i, c in enumerate(clusters.tolist())}
    pick = np.zeros((len(batch), len(clusters)))
    pick[np.arange(len(batch)), [pos[c] for c in batch.cluster_ids.tolist()]] = 1.0
    return g.matmul(g.constant(pick), bound["b_free"])


def _loss(g, bound, cfg, batch, rng, weight_names, n_train, clusters, label=None):
    out = forward_graph(g, bound, cfg.arch, batch, True, rng)
    n = len(batch)
    y = g.constant(batch.targets.reshape(-1, 1))
    if cfg.random_effects and cfg.effects_mode == "blup":
        psi = {k[4:]: v for k, v in bound.items() if k.startswith("psi_")}
        design = RandomEffectsDesign.from_ids(batch.cluster_ids)
        data_loss = g.scalar_mul(marginal_nll(out, batch.targets, design, psi, batch_label=label),
                                 1.0 / n)
    elif cfg.random_effects:
        resid = g.sub(y, g.add(out, _free_effects(g, bound, batch, clusters)))
        # Gaussian prior on b with the variance ratio fixed at its initial value 1
        prior = g.scalar_mul(g.sum(g.square(bound["b_free"])), 1.0 / n_train)
        data_loss = g.add(g.scalar_mul(g.sum(g.square(resid)), 1.0 / n), prior)
    else:
        data_loss = g.scalar_mul(g.sum(g.square(g.sub(y, out))), 1.0 / n)
    if cfg.l2 > 0:
        penalty = None
        for k in weight_names:
            term = g.sum(g.square(bound[k]))
            penalty = term if penalty is None else g.add(penalty, term)
        return g.add(data_loss, g.scalar_mul(penalty, cfg.l2)), data_loss
    return data_loss, data_loss


def _validation_loss(cfg, params, cov, effects, batch):
    pred = predict(params, batch)
    if cfg.random_effects and cfg.effects_mode == "blup":
        design = RandomEffectsDesign.from_ids(batch.cluster_ids)
        return marginal_nll(pred, batch.targets, design, cov) / len(batch)
    if effects is not None:
        pred = random_effect_layer(pred, batch.cluster_ids, effects)
    return float(np.mean((batch.targets - pred.reshape(-1)) ** 2))


def _blup(params, cov, batch):
    design = RandomEffectsDesign.from_ids(batch.cluster_ids)
    resid = batch.targets - predict(params, batch).reshape(-1)
    return blup_predict(design, cov, resid)


def train(cfg: RunConfig, data: WindowDataset, split: dict, seed: int) -> TrainedModel:
    """Fit one model with Adam and early stopping on the validation loss.

    Standard models minimise mean squared error.  Random-effects models in
    ``blup`` mode minimise the marginal negative log-likelihood per window,
    updating the covariance parameters jointly with the weights, and take
    their cluster effects from the BLUP on the full training set.  In
    ``map`` mode the effects are free parameters under a fixed Gaussian
    prior.  The L2 penalty covers weights only.  The state of the best
    validation epoch is restored.
    """
    if len(split["train"]) == 0 or len(split["val"]) == 0:
        raise ContractError("train and validation splits must be non-empty")
    check_disjoint(split)
    train_data = data.subset(split["train"])
    prep = Preprocessor.fit(train_data)
    tr = prep.batch(train_data, cfg.window_length)
    va = prep.batch(data.subset(split["val"]), cfg.window_length)
    params = build_params(cfg.arch, tr.n_features, tr.n_meta, cfg.hidden, seed, cfg.meta_hidden)
    clusters = np.unique(tr.cluster_ids)
    cov = CovarianceParams.initial() if cfg.random_effects else None
    state = dict(params.arrays)
    blup_mode = cfg.random_effects and cfg.effects_mode == "blup"
    if blup_mode:
        state.update({f"psi_{k}": v for k, v in cov.as_arrays().items()})
    elif cfg.random_effects:
        state["b_free"] = np.zeros((len(clusters), 1))
    weight_names = params.weight_names()
    opt = Adam(cfg.learning_rate)
    rng = np.random.default_rng([seed, 1])
    best = None
    curves, stale = [], 0
    for epoch in range(1, cfg.max_epochs + 1):
        running, seen = 0.0, 0
        for b, idx in enumerate(_batches(tr, cfg.batch_size, rng, cfg.random_effects)):
            batch = tr.subset(idx)
            g = Graph()
            bound = {k: g.leaf(v, requires_grad=True, name=k) for k, v in state.items()}
            try:
                loss, data_loss = _loss(g, bound, cfg, batch, rng, weight_names, len(tr),
                                        clusters, (epoch, b))
            except NumericError as exc:
                raise TrainingError(str(exc), {"epoch": epoch, "batch": b, **_batch_stats(batch)}) from exc
            value = float(loss.values[0, 0])
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}",
                                    {"epoch": epoch, "batch": b, "loss": value, **_batch_stats(batch)})
            g.backward(loss)
            opt.step(state, {k: t.grad for k, t in bound.items() if t.grad is not None})
            running += float(data_loss.values[0, 0]) * len(batch)
            seen += len(batch)
        params.arrays = {k: state[k] for k in params.arrays}
        if blup_mode:
            cov = CovarianceParams.from_arrays({k[4:]: v for k, v in state.items() if k.startswith("psi_")})
            effects = None
        elif cfg.random_effects:
            effects = RandomEffectsEstimate(clusters, state["b_free"].copy())
        else:
            effects = None
        val = _validation_loss(cfg, params, cov, effects, va)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}",
                                {"epoch": epoch, **_batch_stats(va)})
        curves.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val,
                       "weight_norm": float(np.sqrt(sum(np.sum(state[k] ** 2) for k in weight_names)))})
        if best is None or val < best[0] - cfg.min_delta:
            if blup_mode:
                effects = _blup(params, cov, tr)
            best = (val, params.copy(), None if cov is None else cov.copy(), effects, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[4])
                break
    _, best_params, best_cov, best_effects, best_epoch = best
    return TrainedModel(best_params, prep, cfg.random_effects, best_cov, best_effects,
                        pd.DataFrame(curves), best_epoch, list(cfg.features), cfg.window_length)


# -- evaluation ----------------------------------------------------------------------

def regression_metrics(pred, target) -> dict:
    err = np.asarray(target, dtype=float).reshape(-1) - np.asarray(pred, dtype=float).reshape(-1)
    if err.size == 0:
        raise ContractError("cannot evaluate on an empty test set")
    mse = float(np.mean(err ** 2))
    return {"mse": mse, "mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(mse))}


def target_summary(y) -> dict:
    y = np.asarray(y, dtype=float)
    q1, med, q3 = np.percentile(y, [25, 50, 75])
    return {"median": float(med), "sd": float(y.std()), "q1": float(q1), "q3": float(q3)}


@dataclass
class EvalReport:
    per_seed: pd.DataFrame
    test_targets: dict
    overall_targets: dict

    @property
    def aggregate(self) -> dict:
        out = {}
        for m in ("mse", "mae", "rmse"):
            col = self.per_seed[m]
            out[m] = (float(col.mean()), float(col.std(ddof=1)) if len(col) > 1 else 0.0)
        return out

    def ratios(self, which="test") -> dict:
        stats = self.test_targets if which == "test" else self.overall_targets
        rmse = self.aggregate["rmse"][0]
        iqr = stats["q3"] - stats["q1"]
        return {"rmse_sd": rmse / stats["sd"] if stats["sd"] > 0 else np.nan,
                "rmse_iqr": rmse / iqr if iqr > 0 else np.nan}

    def summary(self) -> pd.DataFrame:
        rows = [{"quantity": f"{m}_{s}", "value": v[i]}
                for m, v in self.aggregate.items() for i, s in enumerate(("mean", "sd"))]
        rows += [{"quantity": f"test_target_{k}", "value": v} for k, v in self.test_targets.items()]
        rows += [{"quantity": f"overall_target_{k}", "value": v} for k, v in self.overall_targets.items()]
        rows += [{"quantity": f"{k}_test", "value": v} for k, v in self.ratios("test").items()]
        rows += [{"quantity": f"{k}_overall", "value": v} for k, v in self.ratios("overall").items()]
        return pd.DataFrame(rows)

    def write(self, directory, prefix="report"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.per_seed.to_csv(directory / f"{prefix}_per_seed.csv", index=False, float_format="%.17g")
        self.summary().to_csv(directory / f"{prefix}_summary.csv", index=False, float_format="%.17g")


def evaluate(model: TrainedModel, data: WindowDataset, test_index) -> dict:
    test_index = np.asarray(test_index)
    if test_index.size == 0:
        raise ContractError("cannot evaluate on an empty test set")
    test = data.subset(test_index)
    return regression_metrics(model.predict(test), test.targets)


def run_experiment(cfg: RunConfig, data: WindowDataset | None = None, out_dir=None,
                   keep_models=False):
    """Train and test once per seed on a fixed split; aggregate the metrics.

    The split depends only on ``cfg.split_seed``; the seeds vary weight
    initialisation, batch order and dropout.
    """
    if data is None:
        if cfg.data_dir is None:
            raise ConfigError("no data given and no data_dir configured")
        data = load_window_dataset(cfg.data_dir, cfg.features, cfg.window_length)
    split = split_dataset(data, cfg.split_seed, cfg.split_fractions)
    if len(split["test"]) == 0:
        raise ContractError("test split is empty")
    rows, models = [], {}
    for seed in cfg.seeds:
        model = train(cfg, data, split, seed)
        rows.append({"seed": seed, **evaluate(model, data, split["test"]),
                     "best_epoch": model.best_epoch})
        if keep_models:
            models[seed] = model
        if out_dir is not None:
            curves_dir = Path(out_dir) / "curves"
            curves_dir.mkdir(parents=True, exist_ok=True)
            model.curves.to_csv(curves_dir / f"seed{seed}.csv", index=False, float_format="%.17g")
    report = EvalReport(pd.DataFrame(rows), target_summary(data.targets[split["test"]]),
                        target_summary(data.targets))
    if out_dir is not None:
        report.write(out_dir)
    return (report, models) if keep_models else report
