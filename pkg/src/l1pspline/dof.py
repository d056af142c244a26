"""Degrees-of-freedom estimators for l1-penalized fits.

Five estimators are provided:

* ``stein``: trace of the local linear map of the fit on its active set, i.e.
  the divergence of the fitting map (random-effect penalty held fixed).
* ``restricted``: per-block traces with the cross-terms between blocks dropped.
* ``admm``: counts of nonzero penalized differences.
* ``ridge`` and ``ridge_restricted``: the quadratic-penalty smoother at the same
  smoothing parameters, jointly or block by block.

Per-smooth counts come in two conventions. ``centered`` works in the
sum-to-zero coordinates the model is fit in, so a centered smooth with ``k+1``
order differences and active set ``A`` has ``k + |A|`` free directions.
``augmented`` uses the uncentered augmented basis, which adds one for the constant
direction that the centered smooth shares with the intercept.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .admm import FitResult
from .model import DesignBundle
from .splinebasis import augmented_diff

COND_LIMIT = 1e12
TAU_BRACKET = (1e-8, 1e8)
ESTIMATORS = ("stein", "restricted", "admm", "ridge", "ridge_restricted")


@dataclass(frozen=True)
class ActiveSet:
    A: list          # per smooth: rows of D_j with nonzero w_j (0-based)
    A_star: list     # per smooth: columns of F~_j M_j kept (0-based)

    def sizes(self) -> list:
        return [len(a) for a in self.A]


@dataclass
class DfReport:
    estimator: str
    overall: float
    per_smooth: np.ndarray
    random_effects: float
    status: str = "ok"
    per_smooth_augmented: Optional[np.ndarray] = None
    tau: float = float("nan")

    @classmethod
    def unstable(cls, estimator: str, J: int, tau: float) -> "DfReport":
        nan = float("nan")
        return cls(estimator, nan, np.full(J, nan), nan, "unstable", np.full(J, nan), tau)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def active_set(fit: FitResult, bundle: Optional[DesignBundle] = None) -> ActiveSet:
    A, A_star = [], []
    for j, w in enumerate(fit.state.w):
        a = np.flatnonzero(w)
        k = bundle.smooths[j].k if bundle is not None else None
        if k is None:
            raise ValueError("bundle needed to build augmented active sets")
        A.append(a)
        A_star.append(np.concatenate([np.arange(k + 1), a + k + 1]))
    return ActiveSet(A, A_star)


def _tau(fit: FitResult, tau: Optional[float]) -> float:
    return float(fit.tau if tau is None else tau)


def _re_penalty(bundle: DesignBundle, tau: float):
    """Penalty block for Z, or None to drop Z entirely (tau = inf)."""
    if not bundle.has_re or not math.isfinite(tau):
        return None
    return tau * bundle.S_solve


def _block_traces(blocks: list, penalties: list):
    """Traces of the diagonal blocks of ``(A'A + Omega)^-1 A'A``.

    Returns ``None`` when the system fails the condition gate.
    """
    A = np.hstack(blocks)
    m = A.shape[1]
    Om = np.zeros((m, m))
    sl, start = [], 0
    for blk, pen in zip(blocks, penalties):
        s = slice(start, start + blk.shape[1])
        sl.append(s)
        if pen is not None:
            Om[s, s] = pen
        start += blk.shape[1]
    AtA = A.T @ A
    M = AtA + Om
    if m == 0:
        return []
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return None
    T = np.linalg.solve(M, AtA)
    d = np.diag(T)
    return [float(np.sum(d[s])) for s in sl]


def _restricted_basis(bundle: DesignBundle, j: int, a: np.ndarray) -> np.ndarray:
    """Columns spanning ``{F_j beta : D_j[inactive] beta = 0}`` (model coordinates)."""
    D = bundle.D[j]
    inactive = np.setdiff1d(np.arange(D.shape[0]), a)
    if inactive.size == 0:
        return bundle.F[j]
    B = scipy.linalg.null_space(D[inactive])
    return bundle.F[j] @ B


def _augmented_basis(bundle: DesignBundle, j: int, a_star: np.ndarray) -> np.ndarray:
    """Augmented-basis columns ``F~_j M_j`` restricted to ``A*_j``."""
    k = bundle.smooths[j].k
    _, minv = augmented_diff(k, bundle.F_tilde[j].shape[1])
    return (bundle.F_tilde[j] @ minv)[:, a_star]


def _augmented_counts(bundle, act: ActiveSet) -> np.ndarray:
    return np.array([bundle.smooths[j].k + 1 + len(a) for j, a in enumerate(act.A)], float)


def df_stein(fit: FitResult, bundle: DesignBundle, tau: Optional[float] = None,
             convention: str = "centered") -> DfReport:
    tau = _tau(fit, tau)
    act = active_set(fit, bundle)
    re_pen = _re_penalty(bundle, tau)
    if convention == "centered":
        blocks = [np.ones((bundle.n, 1))]
        pens = [None]
        blocks += [_restricted_basis(bundle, j, a) for j, a in enumerate(act.A)]
        pens += [None] * bundle.J
    elif convention == "augmented":
        blocks = [_augmented_basis(bundle, j, s) for j, s in enumerate(act.A_star)]
        pens = [None] * bundle.J
    else:
        raise ValueError(f"unknown convention {convention!r}")
    if re_pen is not None:
        blocks.append(bundle.Z)
        pens.append(re_pen)
    tr = _block_traces(blocks, pens)
    if tr is None:
        return DfReport.unstable("stein", bundle.J, tau)
    re = tr[-1] if re_pen is not None else 0.0
    if convention == "centered":
        smooth = np.array(tr[1:1 + bundle.J])
        overall = float(sum(tr))
        aug = smooth + np.array([float(sm.centered) for sm in bundle.smooths])
    else:
        smooth = np.array(tr[:bundle.J])
        overall = 1.0 + float(sum(tr))
        aug = smooth.copy()
    return DfReport("stein", overall, smooth, float(re), "ok", aug, tau)


def re_trace(bundle: DesignBundle, tau: float) -> float:
    """``tr((Z'Z + tau S)^-1 Z'Z)``; zero when tau is infinite."""
    if not bundle.has_re or not math.isfinite(tau):
        return 0.0
    ZtZ = bundle.Z.T @ bundle.Z
    M = ZtZ + tau * bundle.S_solve
    if tau == 0:
        return float(np.linalg.matrix_rank(ZtZ))
    return float(np.trace(np.linalg.solve(M, ZtZ)))


def df_restricted(fit: FitResult, bundle: DesignBundle, tau: Optional[float] = None,
                  convention: str = "centered") -> DfReport:
    tau = _tau(fit, tau)
    act = active_set(fit, bundle)
    smooth = []
    for j in range(bundle.J):
        if convention == "centered":
            V = _restricted_basis(bundle, j, act.A[j])
        elif convention == "augmented":
            V = _augmented_basis(bundle, j, act.A_star[j])
        else:
            raise ValueError(f"unknown convention {convention!r}")
        smooth.append(float(np.linalg.matrix_rank(V)) if V.shape[1] else 0.0)
    smooth = np.array(smooth)
    re = re_trace(bundle, tau)
    if convention == "centered":
        aug = smooth + np.array([float(sm.centered) for sm in bundle.smooths])
    else:
        aug = smooth.copy()
    return DfReport("restricted", 1.0 + float(smooth.sum()) + re, smooth, re, "ok",
                    aug, tau)


def df_admm(fit: FitResult, bundle: DesignBundle, tau: Optional[float] = None) -> DfReport:
    tau = _tau(fit, tau)
    smooth = np.array([int(not sm.centered) + sm.k + int(np.count_nonzero(w))
                       for sm, w in zip(bundle.smooths, fit.state.w)], dtype=float)
    re = re_trace(bundle, tau)
    aug = smooth + np.array([float(sm.centered) for sm in bundle.smooths])
    return DfReport("admm", 1.0 + float(smooth.sum()) + re, smooth, re, "ok", aug, tau)


def df_ridge(fit: FitResult, bundle: DesignBundle, tau: Optional[float] = None) -> DfReport:
    tau = _tau(fit, tau)
    # trace of the full quadratic-penalty hat matrix, intercept included
    blocks = [np.ones((bundle.n, 1))] + list(bundle.F)
    pens = [None] + [lam * (D.T @ D) for lam, D in zip(fit.lambdas, bundle.D)]
    re_pen = _re_penalty(bundle, tau)
    if re_pen is not None:
        blocks.append(bundle.Z)
        pens.append(re_pen)
    tr = _block_traces(blocks, pens)
    if tr is None:
        return DfReport.unstable("ridge", bundle.J, tau)
    smooth = np.array(tr[1:1 + bundle.J])
    re = tr[-1] if re_pen is not None else 0.0
    aug = smooth + np.array([float(sm.centered) for sm in bundle.smooths])
    return DfReport("ridge", float(sum(tr)), smooth, float(re), "ok", aug, tau)


def df_ridge_restricted(fit: FitResult, bundle: DesignBundle,
                        tau: Optional[float] = None) -> DfReport:
    tau = _tau(fit, tau)
    smooth = []
    for lam, F, D in zip(fit.lambdas, bundle.F, bundle.D):
        FtF = F.T @ F
        smooth.append(float(np.trace(np.linalg.solve(FtF + lam * (D.T @ D), FtF))))
    smooth = np.array(smooth)
    re = re_trace(bundle, tau)
    aug = smooth + np.array([float(sm.centered) for sm in bundle.smooths])
    return DfReport("ridge_restricted", 1.0 + float(smooth.sum()) + re, smooth, re, "ok",
                    aug, tau)


DF_FUNCTIONS = {
    "stein": df_stein,
    "restricted": df_restricted,
    "admm": df_admm,
    "ridge": df_ridge,
    "ridge_restricted": df_ridge_restricted,
}


def all_reports(fit: FitResult, bundle: DesignBundle, tau: Optional[float] = None) -> dict:
    return {name: fn(fit, bundle, tau) for name, fn in DF_FUNCTIONS.items()}


def default_df_fn(fit: FitResult, bundle: DesignBundle) -> Callable[[float], float]:
    """Overall df as a function of tau: Stein, falling back to restricted."""
    def fn(tau: float) -> float:
        rep = df_stein(fit, bundle, tau)
        if not rep.ok:
            rep = df_restricted(fit, bundle, tau)
        return rep.overall
    return fn


def solve_tau(fit: FitResult, bundle: DesignBundle,
              df_fn: Optional[Callable[[float], float]] = None,
              convention: str = "consistent") -> float:
    """Fixed point linking tau to the residual variance and df(tau).

    ``consistent`` solves ``tau = ||r||^2 / (s2_b (n - df(tau)))``, i.e.
    ``tau = s2_eps(tau) / s2_b`` with ``s2_eps(tau) = ||r||^2 / (n - df(tau))``.
    ``reciprocal`` solves ``tau = s2_b (n - df(tau)) / ||r||^2`` (the reciprocal
    relation). ``s2_b`` is ``fit.sigma2_b``; when it is zero the random
    effects carry no variance and ``tau`` is ``inf`` (``consistent``) or ``0``
    (``reciprocal``).
    """
    if convention not in ("consistent", "reciprocal"):
        raise ValueError(f"unknown convention {convention!r}")
    df_fn = df_fn if df_fn is not None else default_df_fn(fit, bundle)
    s2b = float(fit.sigma2_b)
    rr = float(fit.residuals @ fit.residuals)
    n = bundle.n
    if not s2b > 0 or not math.isfinite(s2b):
        return math.inf if convention == "consistent" else 0.0
    if rr == 0:
        return 0.0 if convention == "consistent" else math.inf

    def psi(log_tau: float) -> float:
        tau = math.exp(log_tau)
        resid_df = n - df_fn(tau)
        if convention == "consistent":
            if resid_df <= 0:
                return -math.inf
            return tau - rr / (s2b * resid_df)
        return tau - (s2b / rr) * resid_df

    lo, hi = (math.log(v) for v in TAU_BRACKET)
    f_lo, f_hi = psi(lo), psi(hi)
    if np.sign(f_lo) == np.sign(f_hi) or not (math.isfinite(f_lo) and math.isfinite(f_hi)):
        end = lo if abs(f_lo) <= abs(f_hi) else hi
        warnings.warn("tau fixed point not bracketed in [1e-8, 1e8]; returning the "
                      "endpoint closest to a root", stacklevel=2)
        return math.exp(end)
    return math.exp(brentq(psi, lo, hi, xtol=1e-12, rtol=1e-12))
