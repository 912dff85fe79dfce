import json

import numpy as np
import pandas as pd
import pytest

from mixednet.checkpoint import load_checkpoint
from mixednet.cli import build_parser, main, run_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    assert main(["synth", "--out", str(root), "--participants", "4", "--interval-seconds", "10",
                 "--seed", "3"]) == 0
    assert main(["features", "--data", str(root)]) == 0
    return root


FAST = ["--max-epochs", "3", "--patience", "2", "--hidden", "4", "--meta-hidden", "2",
        "--learning-rate", "0.01"]


def test_synth_and_features_write_expected_files(dataset):
    manifest = pd.read_csv(dataset / "manifest.csv")
    assert manifest["recording_id"].nunique() == 8 and len(manifest) == 32
    assert len(list((dataset / "features").glob("*.csv"))) == 8
    assert (dataset / "truth.csv").exists()


def test_train_then_evaluate(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--arch", "mlp", *FAST]) == 0
    model, header = load_checkpoint(out / "model.npz")
    assert header["arch"] == "mlp" and header["random_effects"] is True
    assert len(pd.read_csv(out / "loss_curves.csv")) <= 3
    assert main(["evaluate", "--checkpoint", str(out / "model.npz"), "--data", str(dataset),
                 "--out", str(out)]) == 0
    metrics = pd.read_csv(out / "evaluation_per_seed.csv")
    assert np.isclose(metrics["rmse"][0] ** 2, metrics["mse"][0])


def test_flags_override_config_file(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"arch": "gru", "max_epochs": 50, "patience": 2, "seeds": [4]}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--arch", "linear",
                                      "--no-random-effects", "--max-epochs", "3"])
    rc = run_config(args)
    assert (rc.arch, rc.random_effects, rc.max_epochs, rc.patience, rc.seeds) == ("linear", False, 3, 2, [4])
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--arch", "linear", "--max-epochs", "3",
                 "--data", str(dataset), "--out", str(out)]) == 0
    _, header = load_checkpoint(out / "model.npz")
    assert header["arch"] == "linear" and header["seed"] == 4


def test_experiment_writes_reports(dataset, tmp_path):
    out = tmp_path / "exp"
    assert main(["experiment", "--data", str(dataset), "--out", str(out), "--arch", "linear",
                 "--seeds", "0,1", *FAST]) == 0
    per_seed = pd.read_csv(out / "report_per_seed.csv")
    assert list(per_seed["seed"]) == [0, 1]
    summary = pd.read_csv(out / "report_summary.csv").set_index("quantity")["value"]
    assert {"rmse_mean", "rmse_sd", "rmse_sd_test", "rmse_iqr_overall"} <= set(summary.index)
    assert json.loads((out / "config.json").read_text())["seeds"] == [0, 1]


def test_lmm_and_stats(dataset, tmp_path):
    assert main(["lmm", "--data", str(dataset), "--out", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "lmm_mnf.csv")
    assert list(table["term"])[:3] == ["Intercept", "MNF", "Lead"]
    for name in ("qq_points.csv", "residuals_vs_fitted.csv", "lmm_variance_and_gq.csv"):
        assert (tmp_path / name).exists()
    assert main(["stats", "--data", str(dataset), "--out", str(tmp_path)]) == 0
    scale = pd.read_csv(tmp_path / "fear_scale.csv").set_index("statistic")["value"]
    assert 0 < scale["cronbach_alpha"] <= 1
    assert len(pd.read_csv(tmp_path / "rm_correlations.csv")) == 10


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--points", "2", "--out", str(tmp_path / "g.csv")]) == 0
    assert capsys.readouterr().out.count("PASS") == 5
    assert len(pd.read_csv(tmp_path / "g.csv")) == 10


@pytest.mark.parametrize("argv", [
    ["train", "--data", "{data}", "--out", "{tmp}", "--split-fractions", "0.5,0.2,0.2"],
    ["train", "--data", "{data}", "--out", "{tmp}", "--patience", "200"],
    ["train", "--data", "{data}"],
    ["train", "--config", "{tmp}/bad.json", "--data", "{data}", "--out", "{tmp}"],
    ["train", "--config", "{tmp}/broken.json", "--data", "{data}", "--out", "{tmp}"],
    ["experiment", "--data", "{tmp}/missing", "--out", "{tmp}"],
    ["evaluate", "--checkpoint", "{tmp}/nothing.npz", "--data", "{data}"],
    ["features", "--data", "{tmp}/missing"],
    ["synth", "--out", "{tmp}/s", "--sigma-b", "-1"],
])
def test_contract_errors_exit_nonzero(dataset, tmp_path, capsys, argv):
    (tmp_path / "bad.json").write_text(json.dumps({"epochs": 3}))
    (tmp_path / "broken.json").write_text("{not json")
    argv = [a.format(data=dataset, tmp=tmp_path) for a in argv]
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["train", "--arch", "lstm"])
    assert info.value.code == 2
