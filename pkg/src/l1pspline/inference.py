"""Variance estimation and ridge-approximation bands for l1-penalized fits.

Bands treat the fit of smooth ``j`` as the linear smoother
``H_j = F_j (F_j'F_j + lam_j D_j'D_j)^-1 F_j'`` applied to its partial
residuals, whose variance is ``s2_eps I + s2_b Z S^+ Z'``. They are centered
on the l1 fit and describe a typical subject (random effects at zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .admm import FitResult, spd_inverse
from .dof import DfReport
from .model import RANK_TOL, DesignBundle, psd_pinv, smooth_grid_design

DEFAULT_GRID = 200
NEG_VAR_TOL = 1e-10


class InferenceError(ValueError):
    """Bands or variances cannot be formed from the given inputs."""


@dataclass
class BandResult:
    j: int
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    kind: str
    includes_intercept: bool

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame({"j": self.j + 1, "x": self.grid, "fit": self.estimate,
                             "lower": self.lower, "upper": self.upper,
                             "kind": self.kind, "level": self.level})


def estimate_variance(fit: FitResult, df) -> float:
    """``||r||^2 / (n - df)`` using Stein df, else restricted, else ADMM.

    ``df`` is a DfReport, a mapping of estimator name to DfReport, or a number.
    """
    if isinstance(df, dict):
        for name in ("stein", "restricted", "admm"):
            rep = df.get(name)
            if rep is not None and rep.ok:
                df = rep
                break
        else:
            raise InferenceError("no usable df estimate")
    if isinstance(df, DfReport):
        if not df.ok:
            raise InferenceError(f"{df.estimator} df is unstable")
        df = df.overall
    n = fit.residuals.shape[0]
    if not df < n:
        raise InferenceError(f"df ({df:.3f}) is not below n ({n}); model is overparameterized")
    return float(fit.residuals @ fit.residuals) / (n - df)


def _variances(fit: FitResult, sigma2_eps, sigma2_b):
    s2e = fit.sigma2_eps if sigma2_eps is None else float(sigma2_eps)
    s2b = fit.sigma2_b if sigma2_b is None else float(sigma2_b)
    if not (math.isfinite(s2e) and s2e >= 0):
        raise InferenceError(f"invalid residual variance {s2e}")
    if not (math.isfinite(s2b) and s2b >= 0):
        raise InferenceError(f"invalid random-effect variance {s2b}")
    return s2e, s2b


class _Marginal:
    """``Var(y) = s2e I + s2b Z S^+ Z'`` in factored form ``s2e I + s2b C C'``."""

    def __init__(self, bundle: DesignBundle, s2e: float, s2b: float):
        self.n = bundle.n
        self.s2e, self.s2b = s2e, s2b
        if bundle.has_re and s2b > 0:
            vals, vecs = np.linalg.eigh(0.5 * (bundle.S + bundle.S.T))
            top = vals.max() if vals.size else 0.0
            keep = vals > RANK_TOL * top
            self.C = bundle.Z @ (vecs[:, keep] / np.sqrt(vals[keep]))
        else:
            self.C = np.zeros((self.n, 0))

    def quad(self, A: np.ndarray) -> np.ndarray:
        """``A' Var A``."""
        CA = self.C.T @ A
        return self.s2e * (A.T @ A) + self.s2b * (CA.T @ CA)

    def inv_quad(self, A: np.ndarray) -> np.ndarray:
        """``A' Var^-1 A`` by the Woodbury identity."""
        if self.s2e <= 0:
            raise InferenceError("residual variance must be positive")
        r = self.C.shape[1]
        AtA = A.T @ A
        if r == 0:
            return AtA / self.s2e
        kappa = self.s2b / self.s2e
        inner = np.eye(r) / kappa + self.C.T @ self.C
        CA = self.C.T @ A
        return (AtA - CA.T @ np.linalg.solve(inner, CA)) / self.s2e

    def intercept_var(self) -> float:
        """GLS variance of the intercept, ``(1' Var^-1 1)^-1``."""
        if self.s2e == 0 and self.s2b == 0:
            return 0.0
        if self.s2e == 0:
            raise InferenceError("intercept variance needs a positive residual variance")
        one = np.ones((self.n, 1))
        return 1.0 / float(self.inv_quad(one)[0, 0])


def _grid(bundle: DesignBundle, j: int, grid) -> np.ndarray:
    if grid is None:
        lo, hi = bundle.bases[j].domain
        return np.linspace(lo, hi, DEFAULT_GRID)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    lo, hi = bundle.bases[j].domain
    if np.any(grid < lo) or np.any(grid > hi):
        raise InferenceError(f"grid leaves the basis domain [{lo}, {hi}]")
    return grid


def _diag_quad(G: np.ndarray, V: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", G @ V, G)
    if np.any(d < -NEG_VAR_TOL * max(1.0, float(np.abs(d).max()))):
        raise InferenceError("negative variance on the band grid")
    return np.maximum(d, 0.0)


def _estimate(fit, bundle, j, G):
    est = G @ fit.beta[j]
    if j == 0:
        est = est + fit.beta0
    return est


def _check_level(level):
    if not 0 < level < 1:
        raise InferenceError(f"level must be in (0, 1), got {level}")


def freq_bands(fit: FitResult, bundle: DesignBundle, j: int, level: float = 0.95,
               grid=None, sigma2_eps: Optional[float] = None,
               sigma2_b: Optional[float] = None) -> BandResult:
    """Pointwise bands from ``H_j Var(y) H_j'``; smooth 0 includes the intercept."""
    _check_level(level)
    s2e, s2b = _variances(fit, sigma2_eps, sigma2_b)
    grid = _grid(bundle, j, grid)
    F, D, lam = bundle.F[j], bundle.D[j], fit.lambdas[j]
    L = spd_inverse(F.T @ F + lam * (D.T @ D), "smoother system") @ F.T   # p' x n
    marg = _Marginal(bundle, s2e, s2b)
    Vbeta = marg.quad(L.T)
    G = smooth_grid_design(bundle, j, grid)
    var = _diag_quad(G, Vbeta)
    if j == 0:
        var = var + marg.intercept_var()
    z = norm.ppf(0.5 + level / 2)
    est = _estimate(fit, bundle, j, G)
    half = z * np.sqrt(var)
    return BandResult(j, grid, est, est - half, est + half, level, "frequentist", j == 0)


def posterior_precision(fit: FitResult, bundle: DesignBundle, j: int,
                        sigma2_eps: Optional[float] = None,
                        sigma2_b: Optional[float] = None, prior: str = "scaled"):
    """``W_j = F_j' Var^-1 F_j + P_j`` for the Gaussian stand-in prior.

    ``prior="scaled"`` uses precision ``lam_j D_j'D_j / s2_eps``, matching the
    quadratic penalty on the scale of the objective; ``prior="unscaled"``
    uses ``lam_j D_j'D_j`` as is.
    """
    s2e, s2b = _variances(fit, sigma2_eps, sigma2_b)
    marg = _Marginal(bundle, s2e, s2b)
    F, D, lam = bundle.F[j], bundle.D[j], fit.lambdas[j]
    if prior == "scaled":
        P = (lam / s2e) * (D.T @ D)
    elif prior == "unscaled":
        P = lam * (D.T @ D)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    return marg.inv_quad(F) + P, marg


def bayes_bands(fit: FitResult, bundle: DesignBundle, j: int, level: float = 0.95,
                grid=None, mode: str = "fast", B: int = 10000, seed: Optional[int] = 0,
                simultaneous: bool = True, sigma2_eps: Optional[float] = None,
                sigma2_b: Optional[float] = None, prior: str = "scaled") -> BandResult:
    """Credible bands from the Gaussian posterior ``N(beta_hat_j, W_j^-1)``.

    ``mode="fast"`` gives pointwise bands from ``diag(F W^-1 F')``.
    ``mode="sim"`` draws ``B`` coefficient vectors; with ``simultaneous`` the
    half-width is the ``level`` quantile of the maximum standardized deviation
    over the grid, otherwise pointwise quantiles of the drawn curves are used.
    """
    _check_level(level)
    if mode not in ("fast", "sim"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = _grid(bundle, j, grid)
    W, marg = posterior_precision(fit, bundle, j, sigma2_eps, sigma2_b, prior)
    Winv = spd_inverse(W, "posterior precision")
    G = smooth_grid_design(bundle, j, grid)
    est = _estimate(fit, bundle, j, G)
    var = _diag_quad(G, Winv)
    v0 = marg.intercept_var() if j == 0 else 0.0
    var = var + v0
    if mode == "fast":
        half = norm.ppf(0.5 + level / 2) * np.sqrt(var)
        return BandResult(j, grid, est, est - half, est + half, level, "bayes_fast", j == 0)
    if B < 100:
        raise InferenceError("simulation mode needs B >= 100 draws")
    rng = np.random.default_rng(seed)
    w, U = np.linalg.eigh(0.5 * (Winv + Winv.T))
    root = U * np.sqrt(np.maximum(w, 0.0))
    dev = rng.standard_normal((B, root.shape[1])) @ root.T @ G.T     # B x grid
    if j == 0:
        dev = dev + math.sqrt(v0) * rng.standard_normal((B, 1))
    if simultaneous:
        sd = np.sqrt(var)
        safe = np.where(sd > 0, sd, 1.0)
        crit = np.quantile(np.max(np.abs(dev) / safe, axis=1), level)
        lower, upper = est - crit * sd, est + crit * sd
    else:
        lower = est + np.quantile(dev, 0.5 - level / 2, axis=0)
        upper = est + np.quantile(dev, 0.5 + level / 2, axis=0)
        lower = np.minimum(lower, est)
        upper = np.maximum(upper, est)
    return BandResult(j, grid, est, lower, upper, level, "bayes_sim", j == 0)


def partial_residuals(fit: FitResult, bundle: DesignBundle, j: int) -> np.ndarray:
    others = sum((bundle.F[l] @ fit.beta[l] for l in range(bundle.J) if l != j),
                 np.zeros(bundle.n))
    re = bundle.Z @ fit.b if bundle.has_re else 0.0
    return bundle.y - fit.beta0 - others - re


def ridge_approx_fit(fit: FitResult, bundle: DesignBundle, j: int):
    """Linear-smoother approximation ``H_j y^(j)`` and its gap to the l1 fit."""
    F, D, lam = bundle.F[j], bundle.D[j], fit.lambdas[j]
    yj = partial_residuals(fit, bundle, j)
    coef = spd_inverse(F.T @ F + lam * (D.T @ D), "smoother system") @ (F.T @ yj)
    approx = F @ coef
    return approx, F @ fit.beta[j] - approx


def pseudo_inverse(S: np.ndarray) -> np.ndarray:
    return psd_pinv(S)
