"""Simulation harness: longitudinal piecewise-linear data, an l2 reference
fitter, change-point metrics, and replicate experiments.

The default truth has kinks at 0.2, 0.4, 0.6 and 0.8 with slopes
(2.5, -2.5, 0, 2.5, -2.5) and ``f(0) = 0``. Each subject has a random
intercept and is observed on a random sub-window of [0, 1], at distinct points
of a regular grid (spacing 0.01 by default) so that subjects share x values.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .admm import AdmmOptions, FitResult, admm_fit, ridge_fit
from .inference import InferenceError, bayes_bands
from .model import DesignBundle, ModelSpec, RandomEffectSpec, SmoothSpec, build_bundle
from .pipeline import analyze, final_fit, summarize_fit
from .tuning import tune


@dataclass(frozen=True)
class PiecewiseLinear:
    breaks: tuple
    slopes: tuple
    value0: float = 0.0
    start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        object.__setattr__(self, "slopes", tuple(float(s) for s in self.slopes))
        if len(self.slopes) != len(self.breaks) + 1:
            raise ValueError("need one more slope than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        knots = np.concatenate([[self.start], self.breaks])
        slopes = np.asarray(self.slopes)
        vals = self.value0 + np.concatenate([[0.0], np.cumsum(np.diff(knots) * slopes[:-1])])
        idx = np.searchsorted(self.breaks, x, side="right")
        return vals[idx] + slopes[idx] * (x - knots[idx])


CANONICAL_TRUTH = PiecewiseLinear((0.2, 0.4, 0.6, 0.8), (2.5, -2.5, 0.0, 2.5, -2.5))
SECOND_TRUTH = PiecewiseLinear((0.3, 0.7), (1.5, 0.0, -1.5))


@dataclass(frozen=True)
class SimDesign:
    truth: PiecewiseLinear = CANONICAL_TRUTH
    n_subjects: int = 50
    obs_range: tuple = (4, 14)
    sigma2_b: float = 1.0
    sigma2_eps: float = 0.01
    intercept: float = 1.0
    window_width: tuple = (0.25, 0.6)
    second_truth: Optional[PiecewiseLinear] = None
    x_resolution: Optional[float] = 0.01
    seed: int = 0

    def __post_init__(self):
        if not all(0 < b < 1 for b in self.truth.breaks):
            raise ValueError("breakpoints must lie inside (0, 1)")
        lo, hi = self.obs_range
        if not 1 <= lo <= hi:
            raise ValueError("invalid observation range")
        wlo, whi = self.window_width
        if not 0 < wlo <= whi <= 1:
            raise ValueError("invalid window width range")
        if self.sigma2_b < 0 or self.sigma2_eps < 0:
            raise ValueError("variances must be nonnegative")
        if self.x_resolution is not None:
            if not 0 < self.x_resolution <= wlo / hi:
                raise ValueError("x_resolution too coarse for the window and observation counts")

    @property
    def groups(self) -> int:
        return 2 if self.second_truth is not None else 1

    def mean(self, x, group=0) -> np.ndarray:
        out = self.intercept + self.truth(x)
        if self.second_truth is not None:
            out = out + np.asarray(group) * self.second_truth(x)
        return out


def two_group_design(seed: int = 0, **kw) -> SimDesign:
    """Two groups of 50 subjects; group 1 adds a second piecewise-linear curve."""
    return SimDesign(second_truth=SECOND_TRUTH, seed=seed, **kw)


def _window_points(rng, a, w, ni, res):
    if res is None:
        return np.sort(rng.uniform(a, a + w, ni))
    first = int(math.ceil(a / res - 1e-9))
    last = int(math.floor((a + w) / res + 1e-9))
    ticks = np.arange(first, last + 1)
    return np.sort(rng.choice(ticks, size=ni, replace=False)) * res


def gen_piecewise(design: SimDesign, seed: Optional[int] = None) -> pd.DataFrame:
    """Simulated dataset with columns subject, group, x, y, mean."""
    rng = np.random.default_rng(design.seed if seed is None else seed)
    frames = []
    sid = 0
    for g in range(design.groups):
        for _ in range(design.n_subjects):
            ni = int(rng.integers(design.obs_range[0], design.obs_range[1] + 1))
            w = rng.uniform(*design.window_width)
            a = rng.uniform(0.0, 1.0 - w)
            x = _window_points(rng, a, w, ni, design.x_resolution)
            b = rng.normal(0.0, math.sqrt(design.sigma2_b))
            eps = rng.normal(0.0, math.sqrt(design.sigma2_eps), ni)
            mu = design.mean(x, g)
            frames.append(pd.DataFrame({"subject": sid, "group": g, "x": x,
                                        "y": mu + b + eps, "mean": mu}))
            sid += 1
    return pd.concat(frames, ignore_index=True)


def default_spec(design: SimDesign, num_basis: int = 21, order: int = 2,
                 diff_order: int = 2, domain=(0.0, 1.0)) -> ModelSpec:
    """Model for simulated data; the basis spans the design domain [0, 1] so
    that with 21 functions the knots fall on the truth's kinks."""
    smooths = [SmoothSpec("x", order, num_basis, diff_order, domain=domain)]
    factors = ()
    if design.groups == 2:
        smooths.append(SmoothSpec("x", order, num_basis, diff_order,
                                  varying_multiplier="group", domain=domain))
        factors = ("group",)
    return ModelSpec("y", "subject", tuple(smooths), RandomEffectSpec(), factors)


def sim_bundle(design: SimDesign, seed: Optional[int] = None, **spec_kw):
    data = gen_piecewise(design, seed)
    return build_bundle(default_spec(design, **spec_kw), data), data


# ---------------------------------------------------------------------------
# l2 reference


def l2_reference_fit(bundle: DesignBundle, K: int = 5, seed: int = 0, path_len: int = 50,
                     b_update: str = "closed_form", lambdas=None, tau=None) -> FitResult:
    """Quadratic-penalty fit with CV-chosen smoothing parameters."""
    opts = AdmmOptions(penalty="l2")
    if lambdas is None or (tau is None and bundle.has_re):
        tr = tune(bundle, K=K, path_len=path_len, opts=opts, seed=seed)
        lambdas = tr.lambdas if lambdas is None else lambdas
        tau = tr.tau if tau is None else tau
    return final_fit(bundle, lambdas, 0.0 if tau is None else tau, opts, b_update)


# ---------------------------------------------------------------------------
# change points


@dataclass(frozen=True)
class ChangePointReport:
    n_inflect: int
    mean_abs_dev: float
    cutoff: float
    locations: np.ndarray = field(default_factory=lambda: np.zeros(0))


def second_divided_differences(x, f) -> np.ndarray:
    """``[(f_{i+1}-f_i)/(x_{i+1}-x_i) - (f_i-f_{i-1})/(x_i-x_{i-1})] / (x_{i+1}-x_i)``
    at the interior grid points."""
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    dx = np.diff(x)
    s = np.diff(f) / dx
    return np.diff(s) / dx[1:]


def inflection_metrics(x, fitted, truth_breaks, c: float = 0.5) -> ChangePointReport:
    x = np.asarray(x, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    if x.shape != fitted.shape or x.size < 3:
        raise ValueError("need at least three matching grid points")
    if not 0 < c < 1:
        raise ValueError("cutoff must be in (0, 1)")
    if np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing")
    d2 = np.abs(second_divided_differences(x, fitted))
    slopes = np.abs(np.diff(fitted) / np.diff(x))
    scale = max(1.0, float(slopes.max()))
    peak = float(d2.max())
    if peak * float(np.min(np.diff(x))) <= 1e-9 * scale:
        return ChangePointReport(0, float("nan"), c)
    locs = x[1:-1][d2 >= c * peak]
    br = np.asarray(truth_breaks, dtype=float)
    dev = np.min(np.abs(locs[:, None] - br[None, :]), axis=1)
    return ChangePointReport(int(locs.size), float(dev.mean()), c, locs)


def _curve_on_data(fit: FitResult, bundle: DesignBundle, data: pd.DataFrame, j: int = 0):
    x = np.asarray(data["x"], dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    f = (bundle.F[j] @ fit.beta[j])[order]
    ux, first = np.unique(xs, return_index=True)
    return ux, f[first]


@dataclass
class PilotParams:
    l1_lambdas: np.ndarray
    l1_tau: float
    l2_lambdas: np.ndarray
    l2_tau: float


def pilot_tuning(design: SimDesign, seed: int, K: int = 5, path_len: int = 50) -> PilotParams:
    bundle, _ = sim_bundle(design, seed)
    t1 = tune(bundle, K=K, path_len=path_len, seed=seed)
    t2 = tune(bundle, K=K, path_len=path_len, opts=AdmmOptions(penalty="l2"), seed=seed)
    return PilotParams(t1.lambdas, t1.tau, t2.lambdas, t2.tau)


def _rep_seeds(seed: int, R: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(R + 1)]


def changepoint_experiment(design: SimDesign = SimDesign(), R: int = 200, seed: int = 0,
                           c: float = 0.5, per_replicate_tuning: bool = False,
                           K: int = 5, path_len: int = 50,
                           opts: AdmmOptions = AdmmOptions()) -> pd.DataFrame:
    """Replicate-level change-point metrics for the l1 and l2 fits."""
    seeds = _rep_seeds(seed, R)
    pilot = None if per_replicate_tuning else pilot_tuning(design, seeds[0], K, path_len)
    rows = []
    for r in range(R):
        bundle, data = sim_bundle(design, seeds[r + 1])
        p = pilot if pilot is not None else pilot_tuning(design, seeds[r + 1], K, path_len)
        fit1 = admm_fit(bundle, p.l1_lambdas, p.l1_tau, opts)
        fit2 = ridge_fit(bundle, p.l2_lambdas, p.l2_tau)
        for method, fit in (("l1", fit1), ("l2", fit2)):
            gx, gf = _curve_on_data(fit, bundle, data)
            rep = inflection_metrics(gx, gf, design.truth.breaks, c)
            rows.append({"replicate": r, "method": method, "n_inflect": rep.n_inflect,
                         "mean_abs_dev": rep.mean_abs_dev, "converged": fit.converged})
    return pd.DataFrame(rows)


def summarize_changepoints(df: pd.DataFrame, n_true: int = 4) -> pd.DataFrame:
    g = df.assign(abs_err=(df["n_inflect"] - n_true).abs()).groupby("method")
    return pd.DataFrame({
        "median_n_inflect": g["n_inflect"].median(),
        "median_abs_count_error": g["abs_err"].median(),
        "median_mean_abs_dev": g["mean_abs_dev"].median(),
        "replicates": g.size(),
    }).reset_index()


def coverage_experiment(design: SimDesign = SimDesign(), R: int = 200, level: float = 0.95,
                        seed: int = 0, grid=None, per_replicate_tuning: bool = False,
                        K: int = 5, path_len: int = 50, methods=("l1", "l2"),
                        opts: AdmmOptions = AdmmOptions()) -> pd.DataFrame:
    """Pointwise coverage of fast Bayesian bands for the first smooth.

    Returns one row per (method, grid point) with the coverage rate, the
    number of replicates whose basis domain contained the point, and the
    number of failed replicates.
    """
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid, dtype=float)
    seeds = _rep_seeds(seed, R)
    pilot = None if per_replicate_tuning else pilot_tuning(design, seeds[0], K, path_len)
    hits = {m: np.zeros(grid.size) for m in methods}
    seen = {m: np.zeros(grid.size) for m in methods}
    failed = {m: 0 for m in methods}
    truth = design.mean(grid, 0)
    for r in range(R):
        bundle, _ = sim_bundle(design, seeds[r + 1])
        p = pilot if pilot is not None else pilot_tuning(design, seeds[r + 1], K, path_len)
        lo, hi = bundle.bases[0].domain
        inside = (grid >= lo) & (grid <= hi)
        for m in methods:
            try:
                o = opts if m == "l1" else AdmmOptions(penalty="l2")
                lam, tau = (p.l1_lambdas, p.l1_tau) if m == "l1" else (p.l2_lambdas, p.l2_tau)
                fit = final_fit(bundle, lam, tau, o, "lme")
                _, _, s2e, s2b = summarize_fit(fit, bundle)
                band = bayes_bands(fit, bundle, 0, level, grid[inside], mode="fast",
                                   sigma2_eps=s2e, sigma2_b=s2b)
            except (InferenceError, ValueError, np.linalg.LinAlgError) as exc:
                warnings.warn(f"replicate {r} ({m}) failed: {exc}", stacklevel=2)
                failed[m] += 1
                continue
            t = truth[inside]
            hits[m][inside] += (band.lower <= t) & (t <= band.upper)
            seen[m][inside] += 1
    rows = []
    for m in methods:
        with np.errstate(invalid="ignore", divide="ignore"):
            cov = hits[m] / seen[m]
        for x, cv, s in zip(grid, cov, seen[m]):
            rows.append({"method": m, "x": x, "coverage": cv, "replicates": int(s),
                         "failed": failed[m]})
    return pd.DataFrame(rows)


def recovery_experiment(design: SimDesign = SimDesign(), R: int = 20, seed: int = 0,
                        K: int = 5, path_len: int = 50, with_l2: bool = True,
                        opts: AdmmOptions = AdmmOptions()) -> pd.DataFrame:
    """Per-replicate variance and df estimates after full tuning."""
    seeds = _rep_seeds(seed, R)
    rows = []
    for r in range(R):
        bundle, _ = sim_bundle(design, seeds[r + 1])
        a = analyze(bundle, K=K, path_len=path_len, opts=opts, seed=seeds[r + 1],
                    band_kind=None)
        row = {"replicate": r, "method": "l1", "sigma2_eps": a.sigma2_eps,
               "sigma2_b": a.sigma2_b, "tau_df": a.tau_df, "converged": a.fit.converged,
               "active": int(sum(len(v) for v in a.fit.active))}
        for name, rep in a.df.items():
            row[f"df_{name}"] = rep.overall
            row[f"df_{name}_smooth"] = float(rep.per_smooth[0])
            row[f"df_{name}_re"] = rep.random_effects
        row["df_stein_smooth_augmented"] = float(a.df["stein"].per_smooth_augmented[0])
        rows.append(row)
        if with_l2:
            fit2 = l2_reference_fit(bundle, K=K, seed=seeds[r + 1], path_len=path_len,
                                    b_update="lme")
            tau_df, reps, s2e, s2b = summarize_fit(fit2, bundle)
            rows.append({"replicate": r, "method": "l2", "sigma2_eps": s2e, "sigma2_b": s2b,
                         "tau_df": tau_df, "converged": fit2.converged,
                         "df_ridge": reps["ridge"].overall,
                         "df_ridge_smooth": float(reps["ridge"].per_smooth[0]),
                         "df_ridge_re": reps["ridge"].random_effects})
    return pd.DataFrame(rows)
