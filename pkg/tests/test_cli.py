import json

import numpy as np
import pandas as pd
import pytest
import yaml

from dmem import __version__
from dmem.cli import RunConfig, main
from dmem.exceptions import ConfigError
from dmem.mem import GammaErrors, MidasLongRunParams, MidasParams, ShortRunParams, simulate, simulate_macro
from dmem.midas import BetaLag

ALL_MODELS = ["amem", "cmem", "mem-midas", "ahar", "gjr", "gm", "dagm", "rgarch"]

SIM = {
    "seed": 7,
    "simulate": {
        "model": "mem-midas", "K": 12, "horizon": 3084,
        "params": {"alpha1": 0.1, "gamma1": 0.08, "beta1": 0.8, "m": 2.5, "zeta": 0.3, "omega2": 3.0},
        "error": {"dist": "gamma", "shape": 5.0},
    },
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def read_table(path):
    return pd.read_csv(path, comment="#")


def header_lines(path):
    return [line for line in path.read_text().splitlines() if line.startswith("#")]


def run_config(data_dir, models, out, **extra):
    cfg = {
        "seed": 3,
        "out": str(out),
        "datasets": [{
            "name": "syn",
            "daily": str(data_dir / "simulated_daily.csv"),
            "schema": {"rvol": "rvol"},
            "macro": {"path": str(data_dir / "simulated_macro.csv")},
        }],
        "models": [{"id": m, "K": 12} if m in ("mem-midas", "gm", "dagm") else {"id": m} for m in models],
        "backtest": {"window": 3000, "stride": 42, "replications": 300},
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    out = root / "data"
    assert main(["simulate", "--config", write_config(root / "sim.yaml", SIM), "--out", str(out)]) == 0
    return out


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestConfig:
    def test_round_trip(self, data_dir, tmp_path):
        cfg = RunConfig.from_dict(run_config(data_dir, ALL_MODELS, tmp_path / "o"))
        again = RunConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert RunConfig.from_dict(yaml.safe_load(cfg.to_yaml())) == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_hash_tracks_settings_not_output_location(self, data_dir, tmp_path):
        a = RunConfig.from_dict(run_config(data_dir, ["amem"], tmp_path / "a"))
        b = RunConfig.from_dict(run_config(data_dir, ["amem"], tmp_path / "b"))
        c = RunConfig.from_dict(run_config(data_dir, ["amem"], tmp_path / "a", seed=4))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()

    @pytest.mark.parametrize("patch, match", [
        ({"models": [{"id": "egarch"}]}, "unknown model id"),
        ({"models": [{"id": "gjr", "estimator": "gmm"}]}, "DMEM models only"),
        ({"models": [{"id": "amem", "estimator": "ols"}]}, "unknown estimator"),
        ({"models": [{"id": "amem"}, {"id": "amem"}]}, "unique"),
        ({"models": [{"id": "gm", "K": 0}]}, "K must be positive"),
        ({"backtest": {"losses": ["MAE"]}}, "unknown loss"),
        ({"backtest": {"alpha": 1.5}}, "alpha"),
        ({"colour": "red"}, "unknown configuration keys"),
        ({"models": [{"id": "amem", "lags": 3}]}, "malformed"),
    ])
    def test_invalid(self, data_dir, tmp_path, patch, match):
        cfg = run_config(data_dir, ["amem"], tmp_path)
        cfg.update(patch)
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_dict(cfg)


class TestErrors:
    def test_unknown_model_fails_before_any_computation(self, data_dir, tmp_path, capsys):
        out = tmp_path / "never"
        cfg = run_config(data_dir, ["amem", "figarch"], out)
        code = main(["fit", "--config", write_config(tmp_path / "c.yaml", cfg)])
        assert code != 0
        record = json.loads(capsys.readouterr().err.strip())
        assert record["status"] == "error"
        assert record["type"] == "ConfigError"
        assert "figarch" in record["message"]
        assert not out.exists()

    def test_missing_data_file(self, tmp_path, capsys):
        cfg = {"out": str(tmp_path / "o"), "models": ["amem"],
               "datasets": [{"name": "x", "daily": str(tmp_path / "absent.csv")}]}
        assert main(["fit", "--config", write_config(tmp_path / "c.yaml", cfg)]) != 0
        assert json.loads(capsys.readouterr().err)["status"] == "error"

    def test_midas_model_without_macro(self, data_dir, tmp_path, capsys):
        cfg = run_config(data_dir, ["gm"], tmp_path / "o")
        del cfg["datasets"][0]["macro"]
        assert main(["fit", "--config", write_config(tmp_path / "c.yaml", cfg)]) != 0
        assert "needs a macro series" in json.loads(capsys.readouterr().err)["message"]

    def test_module_error_carries_model_id(self, tmp_path, capsys):
        d = pd.DataFrame({"date": pd.bdate_range("2010-01-04", periods=15).strftime("%Y-%m-%d"),
                          "ret": 0.1, "rvol": np.linspace(10, 12, 15)})
        d.to_csv(tmp_path / "short.csv", index=False)
        cfg = {"out": str(tmp_path / "o"), "models": ["ahar"],
               "datasets": [{"name": "s", "daily": str(tmp_path / "short.csv")}]}
        assert main(["fit", "--config", write_config(tmp_path / "c.yaml", cfg)]) != 0
        record = json.loads(capsys.readouterr().err)
        assert record["message"].startswith("ahar: ")
        assert record["type"] == "DataError"


class TestSimulate:
    def test_exact_length_and_header_echo(self, data_dir):
        daily = data_dir / "simulated_daily.csv"
        assert len(read_table(daily)) == 3084
        head = header_lines(daily)
        assert head[0] == f"# dmem {__version__}"
        assert any(line.startswith("# config_hash ") for line in head)
        params = json.loads(next(line for line in head if line.startswith("# params "))[len("# params "):])
        assert params == SIM["simulate"]["params"]
        assert "# model mem-midas" in head

    def test_macro_covers_lags(self, data_dir):
        daily, macro = read_table(data_dir / "simulated_daily.csv"), read_table(data_dir / "simulated_macro.csv")
        months = pd.PeriodIndex(pd.to_datetime(daily.date), freq="M").unique()
        assert len(macro) == len(months) + 12

    def test_seed_reproducible(self, data_dir, tmp_path):
        cfg = write_config(tmp_path / "sim.yaml", SIM)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"]) == 0
        assert dir_bytes(tmp_path / "a") == dir_bytes(data_dir)
        assert dir_bytes(tmp_path / "b") != dir_bytes(data_dir)

    def test_missing_parameter(self, tmp_path, capsys):
        cfg = {"simulate": {"model": "amem", "params": {"alpha1": 0.1, "gamma1": 0.0}}}
        assert main(["simulate", "--config", write_config(tmp_path / "c.yaml", cfg), "--out", str(tmp_path)]) != 0
        assert "beta1" in json.loads(capsys.readouterr().err)["message"]


class TestFit:
    def test_amem_only_gives_one_result_file(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["fit", "--config", write_config(tmp_path / "c.yaml", run_config(data_dir, ["amem"], out))]) == 0
        fits = sorted(out.glob("fit_*.json"))
        assert [p.name for p in fits] == ["fit_syn_amem.json"]
        doc = json.loads(fits[0].read_text())
        assert doc["meta"]["header"][0] == f"dmem {__version__}"
        assert set(doc["result"]["params"]) >= {"alpha1", "gamma1", "beta1"}

    def test_all_models_deterministic(self, data_dir, tmp_path):
        for name in ("a", "b"):
            cfg = run_config(data_dir, ALL_MODELS, tmp_path / name)
            assert main(["fit", "--config", write_config(tmp_path / f"{name}.yaml", cfg)]) == 0
        a = dir_bytes(tmp_path / "a")
        assert sorted(k for k in a if k.startswith("fit_")) == sorted(f"fit_syn_{m}.json" for m in ALL_MODELS)
        assert a == dir_bytes(tmp_path / "b")
        paths = read_table(tmp_path / "a" / "paths_syn.csv")
        assert list(paths.columns) == ["date", "model", "mu", "tau", "xi"]
        assert (paths.groupby("model").size() == 3084).all()
        lb = read_table(tmp_path / "a" / "ljung_box_syn.csv")
        assert set(lb.model) == set(ALL_MODELS)
        assert lb.pvalue.between(0, 1).all()


@pytest.fixture(scope="module")
def runs(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("bt")
    for name in ("a", "b"):
        cfg = run_config(data_dir, ["amem", "gjr", "mem-midas"], root / name)
        assert main(["backtest", "--config", write_config(root / f"{name}.yaml", cfg)]) == 0
    return root


class TestBacktest:
    def test_byte_identical_rerun(self, runs):
        assert dir_bytes(runs / "a") == dir_bytes(runs / "b")

    def test_forecast_counts(self, runs):
        fc = read_table(runs / "a" / "forecasts_syn.csv")
        assert (fc.groupby("model").size() == 84).all()
        assert len(fc) == 3 * 84

    def test_loss_table_layout(self, runs):
        table = read_table(runs / "a" / "loss_table_syn_qlike.csv")
        fc = read_table(runs / "a" / "forecasts_syn.csv")
        years = sorted({d[:4] for d in fc.date})
        assert list(table.period.unique()) == years + ["Full"]
        assert set(table.model) == {"amem", "gjr", "mem-midas"}
        losses = read_table(runs / "a" / "losses_syn_qlike.csv")
        full = table[table.period == "Full"].set_index("model")["mean"]
        by_model = losses.groupby("model")["qlike"].mean()
        for m in full.index:
            assert full[m] == pytest.approx(by_model[m], rel=1e-9)

    def test_mcs_json(self, runs):
        doc = json.loads((runs / "a" / "mcs_syn.json").read_text())
        for res in doc["mcs"].values():
            assert res["pvalues"][max(res["pvalues"], key=res["pvalues"].get)] == 1.0
            assert set(res["survivors"]) <= {"amem", "gjr", "mem-midas"}
            assert res["settings"]["replications"] == 300

    def test_single_model_mcs_is_that_model(self, data_dir, tmp_path):
        cfg = run_config(data_dir, ["gjr"], tmp_path / "o")
        assert main(["backtest", "--config", write_config(tmp_path / "c.yaml", cfg)]) == 0
        doc = json.loads((tmp_path / "o" / "mcs_syn.json").read_text())
        for res in doc["mcs"].values():
            assert res["survivors"] == ["gjr"]
            assert res["pvalues"] == {"gjr": 1.0}


def _midas_csvs(directory, macro, seed):
    params = MidasParams(ShortRunParams(0.05, 0.02, 0.8), MidasLongRunParams(2.5, 0.5, BetaLag(12, 1.0, 2.0)))
    s = simulate("mem-midas", params, GammaErrors(5.0), 2500, seed, macro=macro)
    directory.mkdir()
    pd.DataFrame({"date": s.dates, "ret": s.ret, "rvol": s.rvol}).to_csv(directory / "daily.csv", index=False)
    pd.DataFrame({"date": s.macro.labels(), "value": s.macro.values}).to_csv(directory / "macro.csv", index=False)
    return {"name": directory.name, "daily": str(directory / "daily.csv"), "schema": {"rvol": "rvol"},
            "macro": {"path": str(directory / "macro.csv")}}


@pytest.fixture(scope="module")
def two_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("lr")
    # both indices share one macro driver, so their long-run components share a factor
    macro = simulate_macro(200, np.random.default_rng(5))
    datasets = [_midas_csvs(root / "idx1", macro, 1), _midas_csvs(root / "idx2", macro, 2)]
    cfg = {"out": str(root / "out"), "datasets": datasets, "models": [{"id": "mem-midas", "K": 12}]}
    assert main(["longrun", "--config", write_config(root / "c.yaml", cfg)]) == 0
    return root / "out"


class TestLongrun:
    def test_common_factor_correlation(self, two_index):
        corr = read_table(two_index / "tau_correlations.csv")
        cross = corr[corr.relation == "within-model"]
        assert len(cross) == 1
        assert cross["corr"].iloc[0] > 0.9

    def test_diagonal_identity(self, two_index):
        corr = read_table(two_index / "tau_correlations.csv")
        diag = corr[corr.relation == "self"]
        assert len(diag) == 2
        np.testing.assert_allclose(diag["corr"], 1.0, rtol=1e-12)

    def test_plot_ready_layout(self, two_index):
        tau = read_table(two_index / "tau_monthly.csv")
        assert list(tau.columns) == ["date", "value", "model", "index"]
        assert set(tau["index"]) == {"idx1", "idx2"}
        assert (tau.value > 0).all()

    def test_empty_model_list(self, data_dir, tmp_path, capsys):
        cfg = run_config(data_dir, [], tmp_path / "o")
        assert main(["longrun", "--config", write_config(tmp_path / "c.yaml", cfg)]) != 0
        assert "at least one model" in json.loads(capsys.readouterr().err)["message"]

    def test_model_without_long_run_component(self, data_dir, tmp_path, capsys):
        cfg = run_config(data_dir, ["gjr"], tmp_path / "o")
        assert main(["longrun", "--config", write_config(tmp_path / "c.yaml", cfg)]) != 0
        assert "long-run component" in json.loads(capsys.readouterr().err)["message"]
