"""l1-penalized P-splines for additive mixed models, fit by ADMM."""

from .admm import AdmmOptions, FitResult, admm_fit, ridge_fit
from .dof import DfReport, active_set, all_reports, df_stein, solve_tau
from .inference import BandResult, bayes_bands, freq_bands
from .model import DesignBundle, ModelSpec, RandomEffectSpec, SmoothSpec, build_bundle
from .pipeline import Analysis, analyze
from .splinebasis import BasisSpec, design_matrix, diff_matrix, make_basis
from .tuning import lambda_max, make_folds, tune

__all__ = [
    "AdmmOptions", "FitResult", "admm_fit", "ridge_fit",
    "DfReport", "active_set", "all_reports", "df_stein", "solve_tau",
    "BandResult", "bayes_bands", "freq_bands",
    "DesignBundle", "ModelSpec", "RandomEffectSpec", "SmoothSpec", "build_bundle",
    "Analysis", "analyze",
    "BasisSpec", "design_matrix", "diff_matrix", "make_basis",
    "lambda_max", "make_folds", "tune",
]
