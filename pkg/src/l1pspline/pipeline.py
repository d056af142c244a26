"""End-to-end analysis: tune, fit, degrees of freedom, variances, bands."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .admm import AdmmOptions, FitResult, admm_fit, ridge_fit
from .dof import all_reports, default_df_fn, solve_tau
from .inference import BandResult, InferenceError, bayes_bands, estimate_variance, freq_bands
from .model import DesignBundle
from .tuning import TuneResult, tune


@dataclass
class Analysis:
    fit: FitResult
    tau_df: float
    df: dict
    sigma2_eps: float
    sigma2_b: float
    tuning: Optional[TuneResult] = None
    bands: list = field(default_factory=list)


def final_fit(bundle: DesignBundle, lambdas, tau: float, opts: AdmmOptions,
              b_update: str = "lme") -> FitResult:
    opts = replace(opts, b_update=b_update)
    if opts.penalty == "l2" and (b_update == "closed_form" or not bundle.has_re):
        return ridge_fit(bundle, lambdas, tau, opts)
    return admm_fit(bundle, lambdas, tau, opts)


def summarize_fit(fit: FitResult, bundle: DesignBundle, tau_convention: str = "consistent"):
    """Degrees of freedom and variance estimates for a fitted model.

    With REML random effects the df are evaluated at the tau solving the
    df fixed point; otherwise at the fit's own tau.
    """
    l2 = fit.options.penalty == "l2"
    if fit.options.b_update == "lme" and bundle.has_re:
        fn = (lambda t: all_reports(fit, bundle, t)["ridge"].overall) if l2 else None
        tau_df = solve_tau(fit, bundle, fn or default_df_fn(fit, bundle), tau_convention)
    else:
        tau_df = fit.tau
    reports = all_reports(fit, bundle, tau_df)
    if l2:
        s2e = estimate_variance(fit, reports["ridge"] if reports["ridge"].ok
                                else reports["ridge_restricted"])
    else:
        s2e = estimate_variance(fit, reports)
    if not bundle.has_re:
        s2b = 0.0
    elif fit.options.b_update == "lme":
        s2b = fit.sigma2_b
    else:
        s2b = s2e / fit.tau if fit.tau > 0 else math.inf
    return tau_df, reports, s2e, s2b


def analyze(bundle: DesignBundle, lambdas=None, tau: Optional[float] = None,
            K: int = 5, path_len: int = 50, opts: AdmmOptions = AdmmOptions(),
            seed: int = 0, b_update: str = "lme", tau_convention: str = "consistent",
            band_kind: str = "bayes_fast", level: float = 0.95, grid=None,
            threads: int = 1) -> Analysis:
    """Tune (unless ``lambdas`` and ``tau`` are given), refit, and summarize."""
    tuning = None
    if lambdas is None or (tau is None and bundle.has_re):
        tuning = tune(bundle, K=K, path_len=path_len, opts=opts, seed=seed, threads=threads)
        lambdas = tuning.lambdas if lambdas is None else lambdas
        tau = tuning.tau if tau is None else tau
    tau = 0.0 if tau is None else tau
    fit = final_fit(bundle, lambdas, tau, opts, b_update)
    tau_df, reports, s2e, s2b = summarize_fit(fit, bundle, tau_convention)
    fit = replace(fit, sigma2_eps=s2e, sigma2_b=s2b)
    out = Analysis(fit, tau_df, reports, s2e, s2b, tuning)
    if band_kind:
        for j in range(bundle.J):
            try:
                out.bands.append(make_bands(fit, bundle, j, band_kind, level, grid, seed))
            except InferenceError:
                pass
    return out


def make_bands(fit: FitResult, bundle: DesignBundle, j: int, kind: str = "bayes_fast",
               level: float = 0.95, grid=None, seed: int = 0) -> BandResult:
    if kind == "frequentist":
        return freq_bands(fit, bundle, j, level, grid)
    if kind == "bayes_fast":
        return bayes_bands(fit, bundle, j, level, grid, mode="fast")
    if kind == "bayes_sim":
        return bayes_bands(fit, bundle, j, level, grid, mode="sim", seed=seed)
    raise ValueError(f"unknown band kind {kind!r}")
