"""Command-line interface: ``l1pspline {fit,tune,simulate,bench}``.

Runs are configured by a YAML file; every output table is a CSV with a header
row and 17 significant digits so that repeated runs are byte-identical.

Exit codes: 0 success, 1 numerical failure (non-convergence under
``--strict``), 2 input error. Errors are reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from .admm import AdmmOptions, SolverError
from .dof import ESTIMATORS
from .inference import InferenceError
from .model import ModelSpec, RandomEffectSpec, SmoothSpec, SpecError, build_bundle
from .pipeline import analyze, make_bands
from .simlab import (SimDesign, changepoint_experiment, coverage_experiment, gen_piecewise,
                     summarize_changepoints, two_group_design)
from .splinebasis import make_basis
from .tuning import CvError, tune

FLOAT_FORMAT = "%.17g"
EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration file or field."""


class NumericalFailure(RuntimeError):
    """A solve did not converge and strict mode is on."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SmoothConfig:
    covariate: str = "x"
    order: int = 2
    num_basis: int = 21
    diff_order: int = 2
    varying_multiplier: Optional[str] = None
    domain: Optional[list] = None


@dataclass
class RandomEffectConfig:
    kind: str = "intercepts"
    covariate: Optional[str] = None
    order: int = 2
    num_basis: int = 6
    domain: Optional[list] = None


@dataclass
class TuningConfig:
    K: int = 5
    path_len: int = 50
    seed: int = 0
    c: float = 0.5
    lambdas: Optional[list] = None
    tau: Optional[float] = None


@dataclass
class SolverConfig:
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    max_iter: int = 1000
    b_update: str = "lme"
    penalty: str = "l1"
    tau_convention: str = "consistent"


@dataclass
class BandConfig:
    kind: str = "bayes_fast"
    level: float = 0.95
    grid_size: int = 200


@dataclass
class SimulateConfig:
    n_subjects: int = 50
    two_group: bool = False
    sigma2_b: float = 1.0
    sigma2_eps: float = 0.01
    replicates: int = 1


@dataclass
class BenchConfig:
    replicates: int = 200
    level: float = 0.95
    experiments: list = field(default_factory=lambda: ["changepoint", "coverage"])
    per_replicate_tuning: bool = False


@dataclass
class RunConfig:
    data: Optional[str] = None
    columns: dict = field(default_factory=lambda: {"subject": "subject", "x": "x", "y": "y"})
    smooths: list = field(default_factory=lambda: [SmoothConfig()])
    random_effects: Optional[RandomEffectConfig] = field(default_factory=RandomEffectConfig)
    factors: list = field(default_factory=list)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    bands: BandConfig = field(default_factory=BandConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output: str = "out"

    def column(self, name: str) -> str:
        """Resolve a logical name through the column mapping."""
        return self.columns.get(name, name)


_BLOCKS = {"tuning": TuningConfig, "solver": SolverConfig, "bands": BandConfig,
           "simulate": SimulateConfig, "bench": BenchConfig}


def _coerce(value, default, path: str):
    if value is None:
        return None
    kind = type(default) if default is not None else None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _block(cls, raw, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    obj = cls()
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown field")
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{path}.{key}"))
    return obj


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse YAML config text; errors name the line or the offending field."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{source}:{where} {getattr(exc, 'problem', exc)}") from None
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    if "data" in raw:
        cfg.data = _coerce(raw["data"], "", "data")
    if "output" in raw:
        cfg.output = _coerce(raw["output"], "", "output")
    if "columns" in raw:
        if not isinstance(raw["columns"], dict):
            raise ConfigError("columns: expected a mapping")
        cfg.columns = {**cfg.columns, **{str(k): str(v) for k, v in raw["columns"].items()}}
    if "smooths" in raw:
        if not isinstance(raw["smooths"], list):
            raise ConfigError("smooths: expected a list")
        cfg.smooths = [_block(SmoothConfig, s, f"smooths[{i}]")
                       for i, s in enumerate(raw["smooths"])]
    if "random_effects" in raw:
        cfg.random_effects = (None if raw["random_effects"] is None else
                              _block(RandomEffectConfig, raw["random_effects"], "random_effects"))
    if "factors" in raw:
        if not isinstance(raw["factors"], list):
            raise ConfigError("factors: expected a list")
        cfg.factors = [str(f) for f in raw["factors"]]
    for name, cls in _BLOCKS.items():
        if name in raw:
            setattr(cfg, name, _block(cls, raw[name], name))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if not cfg.smooths and cfg.random_effects is None:
        raise ConfigError("smooths: model needs at least one smooth or random-effect term")
    for key in ("subject", "y"):
        if key not in cfg.columns:
            raise ConfigError(f"columns.{key}: required")
    t = cfg.tuning
    if t.K < 2:
        raise ConfigError("tuning.K: need at least 2 folds")
    if t.path_len < 2:
        raise ConfigError("tuning.path_len: need at least 2 grid values")
    if not 0 < t.c < 1:
        raise ConfigError("tuning.c: must lie in (0, 1)")
    if t.lambdas is not None and len(t.lambdas) != len(cfg.smooths):
        raise ConfigError("tuning.lambdas: need one value per smooth")
    if not 0 < cfg.bands.level < 1:
        raise ConfigError("bands.level: must lie in (0, 1)")
    if cfg.bands.kind not in ("bayes_fast", "bayes_sim", "frequentist", "none"):
        raise ConfigError(f"bands.kind: unknown kind {cfg.bands.kind!r}")
    if cfg.bands.grid_size < 2:
        raise ConfigError("bands.grid_size: need at least 2 points")
    try:
        solver_options(cfg)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None
    if cfg.solver.tau_convention not in ("consistent", "reciprocal"):
        raise ConfigError(f"solver.tau_convention: unknown value {cfg.solver.tau_convention!r}")
    bad = [e for e in cfg.bench.experiments if e not in ("changepoint", "coverage")]
    if bad:
        raise ConfigError(f"bench.experiments: unknown experiment {bad[0]!r}")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(p))


def solver_options(cfg: RunConfig) -> AdmmOptions:
    s = cfg.solver
    return AdmmOptions(eps_abs=s.eps_abs, eps_rel=s.eps_rel, max_iter=s.max_iter,
                       b_update="closed_form", penalty=s.penalty)


def model_spec(cfg: RunConfig) -> ModelSpec:
    smooths = tuple(SmoothSpec(cfg.column(s.covariate), s.order, s.num_basis, s.diff_order,
                               cfg.column(s.varying_multiplier) if s.varying_multiplier else None,
                               tuple(s.domain) if s.domain is not None else None)
                    for s in cfg.smooths)
    re = cfg.random_effects
    if re is None:
        re_spec = None
    elif re.kind == "spline_curves":
        if re.covariate is None or re.domain is None:
            raise ConfigError("random_effects: spline_curves need a covariate and a domain")
        re_spec = RandomEffectSpec("spline_curves", cfg.column(re.covariate),
                                   make_basis(re.order, re.num_basis, tuple(re.domain)))
    else:
        re_spec = RandomEffectSpec(re.kind)
    return ModelSpec(cfg.column("y"), cfg.column("subject"), smooths, re_spec,
                     tuple(cfg.column(f) for f in cfg.factors))


# ---------------------------------------------------------------------------
# input and output


def read_data(cfg: RunConfig) -> pd.DataFrame:
    if not cfg.data:
        raise ConfigError("data: no input file given")
    path = Path(cfg.data)
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise SpecError(f"data file {str(path)!r} not found") from None
    except pd.errors.EmptyDataError:
        raise SpecError(f"data file {str(path)!r} is empty") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SpecError(f"data file {str(path)!r} cannot be parsed: {exc}") from None
    if df.shape[0] == 0:
        raise SpecError(f"data file {str(path)!r} has no rows")
    needed = [cfg.column("subject"), cfg.column("y")]
    needed += [cfg.column(s.covariate) for s in cfg.smooths]
    needed += [cfg.column(s.varying_multiplier) for s in cfg.smooths if s.varying_multiplier]
    needed += [cfg.column(f) for f in cfg.factors]
    for col in needed:
        if col not in df.columns:
            raise SpecError(f"missing column {col!r} in {str(path)!r}")
    return df


def write_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FORMAT % float(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def path_frame(paths) -> pd.DataFrame:
    rows = []
    for p in paths:
        for i, (g, e, c) in enumerate(zip(p.grid, p.cv_error, p.converged)):
            rows.append({"parameter": p.parameter, "index": i, "value": float(g),
                         "cv_error": float(e), "converged": bool(c),
                         "chosen": i == p.chosen_index})
    return pd.DataFrame(rows, columns=["parameter", "index", "value", "cv_error",
                                       "converged", "chosen"])


def _write_paths(paths, out: Path):
    for p in paths:
        write_csv(path_frame([p]), out / f"path_{p.parameter}.csv")


# ---------------------------------------------------------------------------
# subcommands


def _report(msg: str):
    print(msg, file=sys.stderr)


def cmd_fit(cfg: RunConfig, seed: int, threads: int = 1, strict: bool = False) -> int:
    data = read_data(cfg)
    bundle = build_bundle(model_spec(cfg), data)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.tuning
    lambdas = None if t.lambdas is None else np.asarray(t.lambdas, dtype=float)
    analysis = analyze(bundle, lambdas=lambdas, tau=t.tau, K=t.K, path_len=t.path_len,
                       opts=solver_options(cfg), seed=seed, b_update=cfg.solver.b_update,
                       tau_convention=cfg.solver.tau_convention, band_kind=None,
                       threads=threads)
    fit = analysis.fit
    if analysis.tuning is not None:
        _write_paths(analysis.tuning.paths, out)

    x_col = cfg.column(cfg.smooths[0].covariate) if cfg.smooths else cfg.column("x")
    frame = pd.DataFrame({"subject": data[cfg.column("subject")],
                          "x": data[x_col] if x_col in data.columns else np.nan,
                          "y": bundle.y, "fitted": fit.fitted, "residual": fit.residuals})
    write_csv(frame, out / "fit.csv")
    write_csv(coefficient_frame(fit, bundle), out / "coefficients.csv")

    rows = []
    for name in ESTIMATORS:
        rep = analysis.df[name]
        row = {"estimator": name, "overall": rep.overall}
        for j in range(bundle.J):
            row[f"smooth_{j + 1}"] = float(rep.per_smooth[j])
        row["random_effects"] = rep.random_effects
        row["tau"] = rep.tau
        row["status"] = rep.status
        rows.append(row)
    write_csv(pd.DataFrame(rows), out / "df.csv")

    band_notes = []
    if cfg.bands.kind != "none":
        for j in range(bundle.J):
            lo, hi = bundle.bases[j].domain
            grid = np.linspace(lo, hi, cfg.bands.grid_size)
            try:
                band = make_bands(fit, bundle, j, cfg.bands.kind, cfg.bands.level, grid, seed)
            except InferenceError as exc:
                band_notes.append(f"bands_{j + 1}: {exc}")
                continue
            write_csv(band.to_frame(), out / f"bands_{j + 1}.csv")

    summary = {
        "n": bundle.n, "subjects": bundle.n_subjects, "smooths": bundle.J,
        "penalty": fit.options.penalty, "b_update": fit.options.b_update,
        "lambdas": np.asarray(fit.lambdas, dtype=float), "tau": float(fit.tau),
        "tau_df": float(analysis.tau_df), "sigma2_eps": float(analysis.sigma2_eps),
        "sigma2_b": float(analysis.sigma2_b), "rho": float(fit.rho),
        "converged": fit.converged, "iterations": fit.iterations,
        "active_sizes": [len(a) for a in fit.active], "seed": seed,
    }
    lines = [f"{k}: {_fmt(v)}" for k, v in summary.items()] + band_notes
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not fit.converged:
        msg = f"fit did not converge in {fit.iterations} iterations"
        if strict:
            raise NumericalFailure(msg)
        _report(f"warning: {msg}")
    return EXIT_OK


def coefficient_frame(fit, bundle) -> pd.DataFrame:
    """Intercept, smooth coefficients on the B-spline scale, random effects."""
    rows = [{"term": "intercept", "index": 0, "label": "", "value": float(fit.beta0)}]
    for j in range(bundle.J):
        coef = bundle.Q[j] @ fit.beta[j] if bundle.Q[j] is not None else fit.beta[j]
        rows += [{"term": f"smooth_{j + 1}", "index": i, "label": "", "value": float(v)}
                 for i, v in enumerate(coef)]
    if bundle.has_re:
        labels = (bundle.subject_labels[bundle.z_subject] if bundle.z_subject is not None
                  else np.full(bundle.q, ""))
        rows += [{"term": "random_effect", "index": i, "label": str(lab), "value": float(v)}
                 for i, (lab, v) in enumerate(zip(labels, fit.b))]
    return pd.DataFrame(rows, columns=["term", "index", "label", "value"])


def cmd_tune(cfg: RunConfig, seed: int, threads: int = 1, strict: bool = False) -> int:
    data = read_data(cfg)
    bundle = build_bundle(model_spec(cfg), data)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    res = tune(bundle, K=cfg.tuning.K, path_len=cfg.tuning.path_len,
               opts=solver_options(cfg), seed=seed, threads=threads)
    _write_paths(res.paths, out)
    chosen = [{"parameter": p.parameter, "value": p.chosen,
               "cv_error": float(p.cv_error[p.chosen_index]),
               "converged": bool(p.converged[p.chosen_index])} for p in res.paths]
    write_csv(pd.DataFrame(chosen, columns=["parameter", "value", "cv_error", "converged"]),
              out / "tuned.csv")
    unconverged = [c["parameter"] for c in chosen if not c["converged"]]
    if unconverged:
        msg = f"chosen point not converged for {', '.join(unconverged)}"
        if strict:
            raise NumericalFailure(msg)
        _report(f"warning: {msg}")
    return EXIT_OK


def _sim_design(cfg: RunConfig, seed: int) -> SimDesign:
    s = cfg.simulate
    kw = dict(n_subjects=s.n_subjects, sigma2_b=s.sigma2_b, sigma2_eps=s.sigma2_eps)
    try:
        return two_group_design(seed=seed, **kw) if s.two_group else SimDesign(seed=seed, **kw)
    except ValueError as exc:
        raise ConfigError(f"simulate: {exc}") from None


def cmd_simulate(cfg: RunConfig, seed: int, threads: int = 1, strict: bool = False) -> int:
    design = _sim_design(cfg, seed)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    R = cfg.simulate.replicates
    if R < 1:
        raise ConfigError("simulate.replicates: need at least 1")
    seeds = [seed] if R == 1 else \
        [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(R)]
    for r, s in enumerate(seeds):
        name = "sim.csv" if R == 1 else f"sim_{r + 1:03d}.csv"
        write_csv(gen_piecewise(design, s), out / name)
    # a config that fits the generated data as is
    fit_cfg = {"data": str(out / ("sim.csv" if R == 1 else "sim_001.csv")),
               "columns": {"subject": "subject", "x": "x", "y": "y"},
               "smooths": [{"covariate": "x", "domain": [0.0, 1.0]}],
               "output": str(out / "fit")}
    if design.groups == 2:
        fit_cfg["smooths"].append({"covariate": "x", "domain": [0.0, 1.0],
                                   "varying_multiplier": "group"})
        fit_cfg["factors"] = ["group"]
    (out / "fit_config.yaml").write_text(yaml.safe_dump(fit_cfg, sort_keys=True),
                                         encoding="utf-8")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, seed: int, threads: int = 1, strict: bool = False) -> int:
    design = _sim_design(cfg, seed)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    b, t = cfg.bench, cfg.tuning
    if b.replicates < 1:
        raise ConfigError("bench.replicates: need at least 1")
    opts = solver_options(cfg)
    if "changepoint" in b.experiments:
        reps = changepoint_experiment(design, R=b.replicates, seed=seed, c=t.c,
                                      per_replicate_tuning=b.per_replicate_tuning,
                                      K=t.K, path_len=t.path_len, opts=opts)
        write_csv(reps, out / "changepoint_replicates.csv")
        write_csv(summarize_changepoints(reps), out / "changepoint_summary.csv")
    if "coverage" in b.experiments:
        cov = coverage_experiment(design, R=b.replicates, level=b.level, seed=seed,
                                  per_replicate_tuning=b.per_replicate_tuning,
                                  K=t.K, path_len=t.path_len, opts=opts)
        write_csv(cov, out / "coverage.csv")
        write_csv(summarize_coverage(cov), out / "coverage_summary.csv")
    return EXIT_OK


def summarize_coverage(cov: pd.DataFrame, interior=(0.1, 0.9)) -> pd.DataFrame:
    rows = []
    for m, g in cov.groupby("method", sort=True):
        inside = g[(g.x >= interior[0]) & (g.x <= interior[1])]
        edge = g[(g.x < interior[0]) | (g.x > interior[1])]
        rows.append({"method": m, "interior_coverage": float(inside.coverage.mean()),
                     "edge_coverage": float(edge.coverage.mean()) if len(edge) else math.nan,
                     "failed": int(g.failed.iloc[0])})
    return pd.DataFrame(rows)


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "simulate": cmd_simulate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides tuning.seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for fold fits")
    common.add_argument("--strict", action="store_true",
                        help="treat non-convergence as an error (exit code 1)")
    common.add_argument("--output", help="output directory (overrides the config)")
    parser = argparse.ArgumentParser(prog="l1pspline", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__ or f"run {name}")
    return parser


def _fail(kind: str, msg: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}, sort_keys=True),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg.output = args.output
        seed = cfg.tuning.seed if args.seed is None else args.seed
        if args.threads < 1:
            raise ConfigError("--threads: need at least 1")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if not args.strict else "default")
            return COMMANDS[args.command](cfg, seed, args.threads, args.strict)
    except (ConfigError, SpecError, CvError) as exc:
        return _fail("input", str(exc), EXIT_INPUT)
    except (NumericalFailure, SolverError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    except (InferenceError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
