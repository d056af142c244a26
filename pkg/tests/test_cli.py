import json

import pandas as pd
import pytest

from l1pspline.cli import ConfigError, main, parse_config


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "3", "--output", str(root / "sim")]) == 0
    return root


def _config(root, body):
    path = root / "run.yaml"
    path.write_text(body, encoding="utf-8")
    return str(path)


def test_simulate_then_fit_round_trip(simulated, tmp_path):
    cfg = str(simulated / "sim" / "fit_config.yaml")
    out = tmp_path / "fit"
    assert main(["fit", "--config", cfg, "--output", str(out)]) == 0
    for name in ("fit.csv", "coefficients.csv", "df.csv", "summary.txt", "bands_1.csv",
                 "path_tau.csv", "path_lambda_1.csv"):
        assert (out / name).exists(), name
    df = pd.read_csv(out / "df.csv")
    assert len(df) == 5 and set(df.status) == {"ok"}
    fit = pd.read_csv(out / "fit.csv")
    assert list(fit.columns) == ["subject", "x", "y", "fitted", "residual"]
    assert (fit.y - fit.fitted - fit.residual).abs().max() < 1e-12
    summary = (out / "summary.txt").read_text()
    assert "converged: true" in summary and "sigma2_eps:" in summary


def test_tune_writes_full_paths(simulated, tmp_path):
    data = simulated / "sim" / "sim.csv"
    cfg = _config(tmp_path, f"data: {data}\nsmooths:\n  - {{covariate: x, domain: [0, 1]}}\n"
                            "tuning: {path_len: 15, K: 4}\n")
    assert main(["tune", "--config", cfg, "--output", str(tmp_path / "t")]) == 0
    lam = pd.read_csv(tmp_path / "t" / "path_lambda_1.csv")
    assert len(lam) == 15 and lam.chosen.sum() == 1
    assert lam.loc[lam.converged, "cv_error"].notna().all()
    assert len(pd.read_csv(tmp_path / "t" / "tuned.csv")) == 2


def test_fixed_parameters_skip_tuning(simulated, tmp_path):
    data = simulated / "sim" / "sim.csv"
    cfg = _config(tmp_path, f"data: {data}\nsmooths:\n  - {{covariate: x, domain: [0, 1]}}\n"
                            "tuning: {lambdas: [0.1], tau: 0.01}\n"
                            "solver: {b_update: closed_form}\nbands: {kind: frequentist}\n")
    out = tmp_path / "f"
    assert main(["fit", "--config", cfg, "--output", str(out)]) == 0
    assert not (out / "path_tau.csv").exists()
    assert "lambdas: 0.10000000000000001" in (out / "summary.txt").read_text()


def test_bench_has_both_methods(tmp_path):
    cfg = _config(tmp_path, "bench: {replicates: 2}\ntuning: {path_len: 8}\n")
    assert main(["bench", "--config", cfg, "--output", str(tmp_path / "b")]) == 0
    for name in ("changepoint_summary.csv", "coverage_summary.csv"):
        assert set(pd.read_csv(tmp_path / "b" / name).method) == {"l1", "l2"}


def test_missing_column_is_an_input_error(simulated, tmp_path, capsys):
    data = simulated / "sim" / "sim.csv"
    cfg = _config(tmp_path, f"data: {data}\ncolumns: {{y: response}}\n")
    assert main(["fit", "--config", cfg, "--output", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "input" and "response" in err["message"]


def test_empty_data_is_an_input_error(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    cfg = _config(tmp_path, f"data: {tmp_path / 'empty.csv'}\n")
    assert main(["fit", "--config", cfg]) == 2


def test_bad_row_is_reported(simulated, tmp_path, capsys):
    df = pd.read_csv(simulated / "sim" / "sim.csv")
    df = df.astype({"x": object})
    df.loc[4, "x"] = "n/a"
    df.to_csv(tmp_path / "bad.csv", index=False)
    cfg = _config(tmp_path, f"data: {tmp_path / 'bad.csv'}\n")
    assert main(["fit", "--config", cfg, "--output", str(tmp_path / "o")]) == 2
    assert "row 5" in capsys.readouterr().err


def test_strict_mode_turns_nonconvergence_into_exit_1(simulated, tmp_path):
    data = simulated / "sim" / "sim.csv"
    cfg = _config(tmp_path, f"data: {data}\nsmooths:\n  - {{covariate: x, domain: [0, 1]}}\n"
                            "tuning: {lambdas: [0.1], tau: 0.01}\n"
                            "solver: {max_iter: 2, b_update: closed_form}\n")
    out = str(tmp_path / "o")
    assert main(["fit", "--config", cfg, "--output", out]) == 0
    assert main(["fit", "--config", cfg, "--output", out, "--strict"]) == 1


@pytest.mark.parametrize("text,match", [
    ("data: [unclosed\n", "line"),
    ("solver: {max_iter: many}\n", "solver.max_iter"),
    ("tuning: {K: 1}\n", "tuning.K"),
    ("nonsense: 1\n", "nonsense"),
    ("smooths:\n  - {covariate: x, knots: 5}\n", r"smooths\[0\].knots"),
    ("bands: {level: 1.5}\n", "bands.level"),
    ("smooths: []\nrandom_effects: null\n", "at least one"),
])
def test_config_errors_name_the_field(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_defaults():
    cfg = parse_config("")
    assert cfg.solver.eps_abs == 1e-4 and cfg.solver.max_iter == 1000
    assert cfg.tuning.K == 5 and cfg.tuning.c == 0.5


def test_unknown_subcommand_exits_2():
    assert main(["frobnicate"]) == 2
