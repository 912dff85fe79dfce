"""Command-line entry point: ``mixednet <command> [options]``.

Training commands read an optional JSON config (``--config``) holding
RunConfig fields; explicit flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import stats
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import MixedNetError
from .gradcheck import SUITES, TOLERANCE, run_suite
from .pipeline import (
    EvalReport, RunConfig, evaluate, load_window_dataset, run_experiment, split_dataset,
    target_summary, train,
)
from .signal import FEAR_ITEMS, extract_features, read_features, read_manifest
from .synth import SynthConfig, write_dataset


def _csv_list(cast):
    return lambda s: [cast(x) for x in s.split(",") if x.strip()]


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--arch", choices=["linear", "mlp", "gru"])
    p.add_argument("--random-effects", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--features", type=_csv_list(str))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--seeds", type=_csv_list(int), help="comma-separated seeds")
    p.add_argument("--split-fractions", type=_csv_list(float))
    p.add_argument("--split-seed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--meta-hidden", type=int)
    p.add_argument("--effects-mode", choices=["blup", "map"])


_RUN_KEYS = ("data_dir", "out_dir", "arch", "random_effects", "features", "learning_rate", "l2",
             "batch_size", "max_epochs", "patience", "min_delta", "seeds", "split_fractions",
             "split_seed", "hidden", "meta_hidden", "effects_mode")


def run_config(args) -> RunConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    base.update({k: getattr(args, k) for k in _RUN_KEYS if getattr(args, k) is not None})
    return RunConfig.from_dict(base)


def _require(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise MixedNetError(f"--{n.replace('_dir', '')} is required")


def cmd_synth(args):
    cfg = SynthConfig(n_participants=args.participants, interval_seconds=args.interval_seconds,
                      sigma_b=args.sigma_b, sigma_e=args.sigma_e, nonlinear=args.nonlinear,
                      seed=args.seed)
    manifest = write_dataset(args.out, cfg)
    print(f"wrote {manifest['recording_id'].nunique()} recordings to {args.out}")


def cmd_features(args):
    feats = extract_features(args.data, args.out)
    print(f"extracted features for {len(feats)} recordings")


def cmd_train(args):
    cfg = run_config(args)
    _require(cfg, "data_dir", "out_dir")
    data = load_window_dataset(cfg.data_dir, cfg.features, cfg.window_length)
    split = split_dataset(data, cfg.split_seed, cfg.split_fractions)
    model = train(cfg, data, split, cfg.seeds[0])
    out = Path(cfg.out_dir)
    save_checkpoint(out / "model.npz", model,
                    {"split_seed": cfg.split_seed, "split_fractions": list(cfg.split_fractions)})
    model.curves.to_csv(out / "loss_curves.csv", index=False, float_format="%.17g")
    print(f"best epoch {model.best_epoch}; checkpoint {out / 'model.npz'}")


def cmd_evaluate(args):
    model, header = load_checkpoint(args.checkpoint)
    data = load_window_dataset(args.data, model.feature_names, model.window_length)
    split = split_dataset(data, header.get("split_seed", 0),
                          header.get("split_fractions", (0.70, 0.15, 0.15)))
    metrics = evaluate(model, data, split["test"])
    report = EvalReport(pd.DataFrame([{"seed": header["seed"], **metrics}]),
                        target_summary(data.targets[split["test"]]), target_summary(data.targets))
    if args.out:
        report.write(args.out, "evaluation")
    print(pd.DataFrame([metrics]).to_string(index=False))


def cmd_experiment(args):
    cfg = run_config(args)
    _require(cfg, "data_dir", "out_dir")
    report = run_experiment(cfg, out_dir=cfg.out_dir)
    Path(cfg.out_dir, "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print(report.summary().to_string(index=False))


def _interval_data(directory):
    return stats.interval_table(read_features(directory), read_manifest(directory))


def cmd_lmm(args):
    data = _interval_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit = stats.fit_lmm(data, args.predictor)
    table = fit.table()[["term", "estimate", "std_error", "p_value"]]
    table.to_csv(out / f"lmm_{args.predictor.lower()}.csv", index=False)
    diag = stats.diagnostics(fit)
    diag["qq"].to_csv(out / "qq_points.csv", index=False)
    diag["resid_vs_fitted"].to_csv(out / "residuals_vs_fitted.csv", index=False)
    gq, p = diag["goldfeld_quandt"]
    pd.DataFrame([{"statistic": "goldfeld_quandt", "value": gq, "p_value": p},
                  {"statistic": "random_intercept_var", "value": fit.random_intercept_var, "p_value": np.nan},
                  {"statistic": "residual_var", "value": fit.residual_var, "p_value": np.nan}]
                 ).to_csv(out / "lmm_variance_and_gq.csv", index=False)
    print(table.to_string(index=False))
    print(f"GQ = {gq:.3f}, p = {p:.3f}")


def cmd_stats(args):
    data = _interval_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = data[FEAR_ITEMS].to_numpy()
    alpha = stats.cronbach_alpha(items)
    pca = stats.pca_first_component(items)
    pd.DataFrame([{"statistic": "cronbach_alpha", "value": alpha},
                  {"statistic": "pca_explained_ratio", "value": pca.explained_ratio},
                  {"statistic": "pca_rank_deficient", "value": float(pca.rank_deficient)}]
                 + [{"statistic": f"loading_{c}", "value": v} for c, v in zip(FEAR_ITEMS, pca.loadings)]
                 ).to_csv(out / "fear_scale.csv", index=False)
    cols = [c for c in ("mnf_mean", "iemg_mean", "hr_mean", "total_fear", "pump") if c in data]
    corr = stats.rm_corr_matrix(data, cols)
    corr.to_csv(out / "rm_correlations.csv", index=False)
    print(f"alpha = {alpha:.3f}; first component explains {pca.explained_ratio:.1%}")
    print(corr.to_string(index=False))


def cmd_gradcheck(args):
    failed = False
    rows = []
    for suite in SUITES:
        df = run_suite(suite, args.points, args.seed)
        worst = df["max_rel_err"].max()
        ok = worst < TOLERANCE
        failed |= not ok
        rows.append(df)
        print(f"{suite:14s} points={len(df):3d} max_rel_err={worst:.2e} {'PASS' if ok else 'FAIL'}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        pd.concat(rows).to_csv(args.out, index=False)
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mixednet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--participants", type=int, default=19)
    p.add_argument("--interval-seconds", type=float, default=30.0)
    p.add_argument("--sigma-b", type=float, default=2.0)
    p.add_argument("--sigma-e", type=float, default=1.0)
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="raw sensor CSVs to feature CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="feature directory (default DATA/features)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model (first seed) and save a checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="multi-seed train and test")
    _add_run_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("lmm", help="mixed model fit and residual diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--predictor", choices=["MNF", "IEMG"], default="MNF")
    p.set_defaults(func=cmd_lmm)

    p = sub.add_parser("stats", help="alpha, PCA and repeated-measures correlations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV of per-point errors")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (MixedNetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
