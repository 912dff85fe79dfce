"""Save and restore trained models as ``.npz`` archives.

Layout (format version 1):

``__header__``
    JSON object: architecture, dimensions, init seed, feature names, gender
    categories, split settings and ``format_version``.
``param/<name>``
    Network weights and biases.
``prep/<stat>``
    Training-set means and standard deviations for series, age and target.
``psi/sigma_b``, ``psi/rho``, ``psi/sigma_e``
    Covariance parameters on their natural scale (random-effects models).
``effects/clusters``, ``effects/b``
    Participant ids and their effect rows.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError
from .mixed import CovarianceParams, RandomEffectsEstimate
from .models import NetworkParams
from .pipeline import Preprocessor, TrainedModel

FORMAT_VERSION = 1


def save_checkpoint(path, model: TrainedModel, extra: dict | None = None):
    p = model.params
    header = {
        "format_version": FORMAT_VERSION,
        "arch": p.arch, "n_features": p.n_features, "n_meta": p.n_meta,
        "hidden": p.hidden, "meta_hidden": p.meta_hidden, "seed": p.seed,
        "random_effects": model.random_effects, "best_epoch": model.best_epoch,
        "feature_names": list(model.feature_names), "window_length": model.window_length,
        "genders": list(model.preprocessor.genders),
        **(extra or {}),
    }
    arrays = {f"param/{k}": v for k, v in p.arrays.items()}
    arrays.update({f"prep/{k}": v for k, v in model.preprocessor.to_arrays().items()})
    if model.covariance is not None:
        c = model.covariance
        arrays.update({"psi/sigma_b": c.sigma_b, "psi/rho": c.rho, "psi/sigma_e": np.array(c.sigma_e)})
    if model.effects is not None:
        arrays["effects/clusters"] = np.asarray(model.effects.clusters)
        arrays["effects/b"] = model.effects.b
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, header)``."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__header__" not in archive:
            raise ContractError(f"{path} is not a model checkpoint")
        header = json.loads(str(archive["__header__"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ContractError(
                f"checkpoint format {header.get('format_version')} unsupported (expected {FORMAT_VERSION})")
        group = lambda prefix: {k[len(prefix):]: archive[k] for k in archive.files if k.startswith(prefix)}
        params = NetworkParams(header["arch"], header["n_features"], header["n_meta"],
                               header["hidden"], header["meta_hidden"], header["seed"],
                               group("param/"))
        psi = group("psi/")
        eff = group("effects/")
        model = TrainedModel(
            params, Preprocessor.from_arrays(group("prep/"), header["genders"]),
            header["random_effects"],
            CovarianceParams.from_values(psi["sigma_b"], float(psi["sigma_e"]), psi["rho"]) if psi else None,
            RandomEffectsEstimate(eff["clusters"], eff["b"]) if eff else None,
            None, header["best_epoch"], header["feature_names"], header["window_length"],
        )
    return model, header
