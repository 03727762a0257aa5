"""
Command-line interface.

``dmem {fit,backtest,simulate,longrun} --config run.yaml [--seed N] [--out DIR]``

Every output file starts with ``#`` header lines recording the software
version, the command and a hash of the effective configuration.  Errors are
reported as a JSON record on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from dmem import __version__, benchmarks, evaluation, inference
from dmem.exceptions import ConfigError, DmemError
from dmem.mem import (
    AmemParams,
    ComponentParams,
    GammaErrors,
    LogNormalErrors,
    LongRunComponentParams,
    MidasLongRunParams,
    MidasParams,
    ShortRunParams,
    simulate,
)
from dmem.midas import BetaLag
from dmem.timeseries import CsvSchema, PanelSeries, assign_periods, attach_macro, load_daily_csv, load_macro_csv

logger = logging.getLogger("dmem")

DMEM_IDS = ("amem", "cmem", "mem-midas")
MODEL_IDS = DMEM_IDS + benchmarks.BENCHMARKS
MIDAS_IDS = ("mem-midas", "gm", "dagm")
TAU_IDS = ("cmem", "mem-midas", "gm", "dagm")
ESTIMATORS = ("ml_gamma", "gmm", "ml_lognormal")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass
class MacroConfig:
    path: str
    date: str = "date"
    value: str = "value"
    transform: str = "level"


@dataclass
class DataConfig:
    name: str
    daily: str
    schema: dict = field(default_factory=lambda: {"rvol": "rvol"})
    frequency: str = "M"
    macro: MacroConfig | None = None


@dataclass
class ModelConfig:
    id: str
    estimator: str | None = None
    K: int = 36


@dataclass
class BacktestConfig:
    window: int = 3000
    stride: int = 42
    losses: list[str] = field(default_factory=lambda: ["QLIKE", "MSE"])
    alpha: float = 0.25
    replications: int = 5000
    block: int | None = None


@dataclass
class SimulateConfig:
    model: str = "amem"
    params: dict = field(default_factory=dict)
    error: dict = field(default_factory=lambda: {"dist": "gamma", "shape": 5.0})
    horizon: int = 5000
    burn_in: int = 0
    frequency: str = "M"
    start: str = "2000-01-03"
    K: int = 36


@dataclass
class RunConfig:
    """Everything a command needs; round-trips through :meth:`to_dict`."""

    datasets: list[DataConfig] = field(default_factory=list)
    models: list[ModelConfig] = field(default_factory=list)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)
    simulate: SimulateConfig | None = None
    out: str = "results"
    seed: int = 0
    base_dir: str = field(default=".", compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        d = dict(d)
        unknown = set(d) - {"datasets", "models", "backtest", "simulate", "out", "seed"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            datasets = []
            for ds in d.get("datasets") or []:
                ds = dict(ds)
                if ds.get("macro") is not None:
                    ds["macro"] = MacroConfig(**ds["macro"])
                datasets.append(DataConfig(**ds))
            models = [ModelConfig(**(m if isinstance(m, dict) else {"id": m})) for m in d.get("models") or []]
            backtest = BacktestConfig(**(d.get("backtest") or {}))
            sim = SimulateConfig(**d["simulate"]) if d.get("simulate") is not None else None
        except TypeError as exc:
            raise ConfigError(f"malformed configuration: {exc}") from None
        cfg = cls(datasets, models, backtest, sim, str(d.get("out", "results")), int(d.get("seed", 0)),
                  str(base_dir))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    @classmethod
    def from_yaml(cls, path) -> RunConfig:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        for m in self.models:
            if m.id not in MODEL_IDS:
                raise ConfigError(f"unknown model id {m.id!r}; known: {', '.join(MODEL_IDS)}")
            if m.estimator is not None and m.estimator not in ESTIMATORS:
                raise ConfigError(f"{m.id}: unknown estimator {m.estimator!r}")
            if m.estimator is not None and m.id not in DMEM_IDS:
                raise ConfigError(f"{m.id}: estimator choice applies to DMEM models only")
            if int(m.K) < 1:
                raise ConfigError(f"{m.id}: K must be positive")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError("model ids must be unique")
        names = [ds.name for ds in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        for loss in self.backtest.losses:
            if loss.upper() not in evaluation.LOSSES:
                raise ConfigError(f"unknown loss {loss!r}")
        if not 0 < self.backtest.alpha < 1:
            raise ConfigError("backtest alpha must lie in (0, 1)")
        if self.simulate is not None and self.simulate.model not in DMEM_IDS:
            raise ConfigError(f"cannot simulate model {self.simulate.model!r}")

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _header(cfg: RunConfig, command: str) -> list[str]:
    return [f"dmem {__version__}", f"command {command}", f"config_hash {cfg.config_hash()}", f"seed {cfg.seed}"]


def _write_csv(path: Path, df: pd.DataFrame, header: list[str]) -> None:
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        df.to_csv(fh, index=False, float_format="%.10g", date_format="%Y-%m-%d", lineterminator="\n")


def _write_json(path: Path, payload: dict, header: list[str]) -> None:
    doc = {"meta": {"header": header}, **payload}
    path.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return None if not math.isfinite(float(o)) else float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def load_dataset(cfg: RunConfig, ds: DataConfig) -> PanelSeries:
    try:
        schema = CsvSchema(**ds.schema)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset {ds.name}: bad schema: {exc}") from None
    series = assign_periods(load_daily_csv(cfg.resolve(ds.daily), schema), ds.frequency)
    if ds.macro is not None:
        raw = load_macro_csv(cfg.resolve(ds.macro.path), ds.macro.date, ds.macro.value)
        series = attach_macro(series, raw, ds.macro.transform)
    return series


def _needs_macro(cfg: RunConfig, ds: DataConfig, series: PanelSeries):
    for m in cfg.models:
        if m.id in MIDAS_IDS and series.macro is None:
            raise ConfigError(f"model {m.id} needs a macro series for dataset {ds.name}")


def fit_model(series: PanelSeries, m: ModelConfig) -> inference.FitResult:
    """Fit one configured model."""
    if m.id in DMEM_IDS:
        model = inference.get_model(m.id, **({"K": m.K} if m.id == "mem-midas" else {}))
        fn = {None: inference.fit_ml_gamma, "ml_gamma": inference.fit_ml_gamma,
              "gmm": inference.fit_gmm, "ml_lognormal": inference.fit_ml_lognormal}[m.estimator]
        return fn(series, model)
    if m.id == "ahar":
        return benchmarks.fit_ahar(series)
    return benchmarks.fit_garch_family(series, m.id, K=m.K)


def _fitter(m: ModelConfig):
    return lambda s: fit_model(s, m)


def _with_context(model_id: str, exc: Exception) -> Exception:
    err = type(exc).__new__(type(exc))
    err.args = (f"{model_id}: {exc}",)
    err.__dict__.update(getattr(exc, "__dict__", {}))
    return err


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_fit(cfg: RunConfig) -> list[Path]:
    """One JSON per (dataset, model), plus fitted paths and Ljung-Box tables."""
    if not cfg.models:
        raise ConfigError("no models configured")
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, "fit")
    written = []
    for ds in cfg.datasets:
        series = load_dataset(cfg, ds)
        _needs_macro(cfg, ds, series)
        paths, lb = [], []
        for m in cfg.models:
            try:
                res = fit_model(series, m)
            except DmemError as exc:
                raise _with_context(m.id, exc) from exc
            p = out / f"fit_{ds.name}_{m.id}.json"
            _write_json(p, {"dataset": ds.name, "result": res.to_dict()}, header)
            written.append(p)
            frame = pd.DataFrame({"date": pd.to_datetime(series.dates), "model": m.id})
            if res.path is not None:
                frame["mu"], frame["tau"], frame["xi"] = res.path.mu, res.path.tau, res.path.xi
            else:
                frame["mu"] = res.spec.vol_path(series, res.theta, res.init)
                frame["tau"], frame["xi"] = np.nan, np.nan
            paths.append(frame)
            for lag, pv in res.diagnostics.get("ljung_box", {}).items():
                lb.append({"model": m.id, "lag": int(lag), "pvalue": pv})
        for name, df in ((f"paths_{ds.name}.csv", pd.concat(paths)), (f"ljung_box_{ds.name}.csv", pd.DataFrame(lb))):
            _write_csv(out / name, df, header)
            written.append(out / name)
    return written


def cmd_backtest(cfg: RunConfig) -> list[Path]:
    """Rolling forecasts, per-day losses, loss tables with MCS flags and MCS JSON."""
    if not cfg.models:
        raise ConfigError("no models configured")
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, "backtest")
    bt = cfg.backtest
    written = []
    for ds in cfg.datasets:
        series = load_dataset(cfg, ds)
        _needs_macro(cfg, ds, series)
        plan = evaluation.BacktestPlan(bt.window, bt.stride, 1, tuple(m.id for m in cfg.models))
        fitters = {m.id: _fitter(m) for m in cfg.models}
        records, panel = evaluation.rolling_backtest(series, plan, fitters=fitters, loss=bt.losses[0])
        fc = evaluation.records_frame(records)
        p = out / f"forecasts_{ds.name}.csv"
        _write_csv(p, fc, header)
        written.append(p)
        forecasts = {mid: fc.loc[fc.model == mid, "forecast"].to_numpy() for mid in panel.models}
        mcs_docs = {}
        for loss in bt.losses:
            lp = evaluation.LossPanel.from_forecasts(panel.dates, series.rvol[-panel.dates.size:], forecasts, loss)
            p = out / f"losses_{ds.name}_{loss.lower()}.csv"
            _write_csv(p, lp.to_frame(), header)
            table = evaluation.loss_table(lp, alpha=bt.alpha, B=bt.replications, seed=cfg.seed, block=bt.block)
            q = out / f"loss_table_{ds.name}_{loss.lower()}.csv"
            _write_csv(q, table, header)
            res = evaluation.mcs(lp, alpha=bt.alpha, B=bt.replications, block=bt.block, seed=cfg.seed)
            mcs_docs[loss.upper()] = res.to_dict()
            written += [p, q]
        p = out / f"mcs_{ds.name}.json"
        _write_json(p, {"dataset": ds.name, "mcs": mcs_docs}, header)
        written.append(p)
    return written


def _simulation_params(sc: SimulateConfig):
    p = dict(sc.params)
    try:
        short = ShortRunParams(p.pop("alpha1"), p.pop("gamma1"), p.pop("beta1"))
        if sc.model == "amem":
            params = AmemParams(short, p.pop("level", 1.0))
        elif sc.model == "cmem":
            params = ComponentParams(short, LongRunComponentParams(
                p.pop("omega_tau"), p.pop("alpha1_tau"), p.pop("gamma1_tau"), p.pop("beta1_tau")))
        else:
            params = MidasParams(short, MidasLongRunParams(
                p.pop("m"), p.pop("zeta"), BetaLag(sc.K, 1.0, p.pop("omega2"))))
    except KeyError as exc:
        raise ConfigError(f"simulate: missing parameter {exc.args[0]!r}") from None
    if p:
        raise ConfigError(f"simulate: unknown parameters {sorted(p)}")
    dist = sc.error.get("dist", "gamma")
    if dist == "gamma":
        err = GammaErrors(float(sc.error.get("shape", 5.0)))
    elif dist == "lognormal":
        err = LogNormalErrors(float(sc.error.get("V", sc.error.get("shape", 0.4))))
    else:
        raise ConfigError(f"simulate: unknown error distribution {dist!r}")
    return params, err


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Simulated daily panel (and macro series for MEM-MIDAS)."""
    sc = cfg.simulate
    if sc is None:
        raise ConfigError("no simulate section configured")
    params, err = _simulation_params(sc)
    series = simulate(sc.model, params, err, sc.horizon, cfg.seed, frequency=sc.frequency,
                      start=sc.start, burn_in=sc.burn_in)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, "simulate") + [
        f"model {sc.model}",
        "params " + json.dumps(sc.params, sort_keys=True),
        "error " + json.dumps(sc.error, sort_keys=True),
    ]
    p = out / "simulated_daily.csv"
    _write_csv(p, series.to_frame()[["date", "ret", "rvol"]], header)
    written = [p]
    if series.macro is not None:
        labels = series.macro.labels()
        q = out / "simulated_macro.csv"
        _write_csv(q, pd.DataFrame({"date": labels, "value": series.macro.values}), header)
        written.append(q)
    return written


def cmd_longrun(cfg: RunConfig) -> list[Path]:
    """Monthly long-run components per model and index, and their correlations.

    GARCH-MIDAS components are on the variance scale and are square-rooted
    so that every series is a volatility level.
    """
    if not cfg.models:
        raise ConfigError("longrun needs at least one model")
    bad = [m.id for m in cfg.models if m.id not in TAU_IDS]
    if bad:
        raise ConfigError(f"models without a long-run component: {bad}")
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, "longrun")
    taus: dict[tuple[str, str], pd.Series] = {}
    for ds in cfg.datasets:
        series = assign_periods(load_dataset(cfg, ds), "M") if ds.frequency != "M" else load_dataset(cfg, ds)
        _needs_macro(cfg, ds, series)
        for m in cfg.models:
            try:
                res = fit_model(series, m)
            except DmemError as exc:
                raise _with_context(m.id, exc) from exc
            if res.path is not None:
                tau = res.path.tau
            else:
                tau = np.sqrt(benchmarks.filter_gm_dagm(series, res.spec.params(res.theta), mean=res.init["mean"])[0])
            taus[(m.id, ds.name)] = evaluation.aggregate_tau_monthly(tau, series)
    common = sorted(set.intersection(*(set(s.index) for s in taus.values())))
    if len(common) < 3:
        raise ConfigError("fewer than 3 common months across datasets")
    rows = []
    for (mid, name), s in taus.items():
        for per, v in s.loc[common].items():
            rows.append({"date": per, "value": float(v), "model": mid, "index": name})
    p = out / "tau_monthly.csv"
    _write_csv(p, pd.DataFrame(rows), header)
    corr = evaluation.tau_correlations({k: s.loc[common].to_numpy() for k, s in taus.items()})
    q = out / "tau_correlations.csv"
    _write_csv(q, corr, header)
    return [p, q]


COMMANDS = {"fit": cmd_fit, "backtest": cmd_backtest, "simulate": cmd_simulate, "longrun": cmd_longrun}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmem", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dmem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.strip().splitlines()[0])
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_yaml(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        files = COMMANDS[args.command](cfg)
    except (DmemError, ValueError, OSError) as exc:
        record = {"status": "error", "command": args.command, "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
