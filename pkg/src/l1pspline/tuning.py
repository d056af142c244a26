"""Smoothing-parameter selection by subject-level K-fold cross-validation.

Parameters are tuned one at a time: first ``tau`` with every ``lambda_j = 0``,
then ``lambda_1``, ``lambda_2``, ... each over a log-spaced path that starts at
the value where the smooth's penalized differences all vanish.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .admm import AdmmOptions, FitResult, admm_fit, ridge_fit, spd_inverse
from .model import DesignBundle

PATH_DECADES = 5.0
TAU_RANGE = (1e-4, 1e4)
L2_DECADES = 4.0


class CvError(ValueError):
    """Fold construction or cross-validation failure."""


# ---------------------------------------------------------------------------
# lambda_max


def _partial_residuals(bundle: DesignBundle, j: int, fit: Optional[FitResult]):
    if fit is None:
        return bundle.y - np.mean(bundle.y), np.zeros(bundle.n)
    others = sum((bundle.F[l] @ fit.beta[l] for l in range(bundle.J) if l != j),
                 np.zeros(bundle.n))
    rest = fit.beta0 + others + (bundle.Z @ fit.b if bundle.has_re else 0.0)
    return bundle.y - rest, others


def lambda_max(bundle: DesignBundle, j: int, current_fit: Optional[FitResult] = None,
               tau: Optional[float] = None, method: str = "kkt") -> float:
    """Smallest ``lambda_j`` at which every penalized difference of smooth
    ``j`` is zero, holding the other smooths at ``current_fit``.

    ``method="kkt"`` refits the intercept, the random effects (at ``tau``) and
    smooth ``j`` restricted to the null space of ``D_j``, then reads the bound
    off the stationarity condition ``F_j' r = D_j' nu``; it is exact for any
    design. ``method="projection"`` evaluates
    ``||(D D')^-1 D (F'F)^-1 F' r_j||_inf`` on the partial residuals, which is
    exact only when ``F_j'F_j`` is a multiple of the identity.
    """
    F, D = bundle.F[j], bundle.D[j]
    DDt = D @ D.T
    if method == "projection":
        r, _ = _partial_residuals(bundle, j, current_fit)
        FtF = F.T @ F
        cond = np.linalg.cond(FtF)
        if not np.isfinite(cond) or cond > 1e12:
            raise CvError(f"F_{j}'F_{j} is singular (condition estimate {cond:.3g})")
        nu = np.linalg.solve(DDt, D @ np.linalg.solve(FtF, F.T @ r))
        return float(np.max(np.abs(nu))) if nu.size else 0.0
    if method != "kkt":
        raise ValueError(f"unknown method {method!r}")
    if tau is None:
        tau = current_fit.tau if current_fit is not None else 0.0
    others = np.zeros(bundle.n)
    if current_fit is not None:
        others = sum((bundle.F[l] @ current_fit.beta[l] for l in range(bundle.J) if l != j),
                     others)
    target = bundle.y - others
    B = scipy.linalg.null_space(D)
    blocks = [np.ones((bundle.n, 1)), F @ B]
    if bundle.has_re:
        blocks.append(bundle.Z)
    X = np.hstack(blocks)
    P = np.zeros((X.shape[1], X.shape[1]))
    if bundle.has_re and math.isfinite(tau):
        P[-bundle.q:, -bundle.q:] = tau * bundle.S_solve
    elif bundle.has_re:
        X = X[:, :-bundle.q]
        P = P[:-bundle.q, :-bundle.q]
    coef = spd_inverse(X.T @ X + P, "null-space fit") @ (X.T @ target)
    r = target - X @ coef
    g = F.T @ r
    nu = np.linalg.solve(DDt, D @ g)
    return float(np.max(np.abs(nu))) if nu.size else 0.0


def lambda_grid(lmax: float, path_len: int = 50, decades: float = PATH_DECADES) -> np.ndarray:
    """Descending log-spaced path from ``lmax`` down ``decades`` decades."""
    if path_len < 2:
        raise ValueError("path_len must be >= 2")
    if not lmax > 0:
        raise ValueError(f"lambda_max must be positive, got {lmax}")
    return lmax * np.logspace(0.0, -decades, path_len)


def tau_grid(bundle: DesignBundle, path_len: int = 50) -> np.ndarray:
    """Descending log-spaced tau path over [1e-4, 1e4] scaled by n / q."""
    scale = bundle.n / max(bundle.q, 1)
    lo, hi = TAU_RANGE
    return scale * np.logspace(math.log10(hi), math.log10(lo), path_len)


def l2_lambda_grid(bundle: DesignBundle, j: int, path_len: int = 50) -> np.ndarray:
    """Quadratic-penalty path centred where ``lambda D'D`` matches ``F'F`` in trace."""
    F, D = bundle.F[j], bundle.D[j]
    ref = float(np.sum(F * F) / np.sum(D * D))
    return ref * np.logspace(L2_DECADES, -L2_DECADES, path_len)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    K: int
    assignments: np.ndarray          # subject code -> fold
    counts: np.ndarray               # K x n_strata subject counts
    feasible: bool

    def test_subjects(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def train_subjects(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != k)


def make_folds(strata, K: int, seed: int = 0) -> FoldPlan:
    """Assign subjects to ``K`` folds, spreading each stratum round-robin.

    ``strata`` gives one factor-combination code per subject (or pass a
    DesignBundle). Subjects are shuffled within each stratum and dealt to
    folds in turn, the dealing position carrying over between strata.
    """
    if isinstance(strata, DesignBundle):
        strata = strata.strata
    strata = np.asarray(strata)
    n_subj = strata.shape[0]
    K = int(K)
    if K < 2:
        raise CvError("K must be at least 2")
    if K > n_subj:
        raise CvError(f"K = {K} exceeds the number of subjects ({n_subj})")
    rng = np.random.default_rng(seed)
    levels, codes = np.unique(strata, return_inverse=True)
    assign = np.empty(n_subj, dtype=int)
    pos = 0
    for s in range(len(levels)):
        members = np.flatnonzero(codes == s)
        members = members[rng.permutation(members.size)]
        assign[members] = (pos + np.arange(members.size)) % K
        pos = (pos + members.size) % K
    counts = np.zeros((K, len(levels)), dtype=int)
    np.add.at(counts, (assign, codes), 1)
    feasible = bool(np.all(counts >= 2))
    if not feasible:
        warnings.warn("some fold has fewer than two subjects of a factor combination; "
                      "the balance constraint was relaxed", stacklevel=2)
    return FoldPlan(K, assign, counts, feasible)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvPoint:
    error: float
    converged: bool
    rho: float
    states: list
    pinv_fallback: bool = False


class CrossValidator:
    """Held-out prediction error with random effects re-estimated on the test fold."""

    def __init__(self, bundle: DesignBundle, plan: FoldPlan,
                 opts: AdmmOptions = AdmmOptions(), threads: int = 1):
        if plan.assignments.shape[0] != bundle.n_subjects:
            raise CvError("fold plan does not match the bundle's subjects")
        self.bundle = bundle
        self.plan = plan
        self.opts = opts
        self.threads = max(int(threads), 1)
        self.train, self.test = [], []
        for k in range(plan.K):
            te = plan.test_subjects(k)
            if te.size == 0:
                raise CvError(f"fold {k} has no test subjects")
            self.train.append(bundle.subset(plan.train_subjects(k)))
            self.test.append(bundle.subset(te))

    def _fit(self, k, lambdas, tau, warm, closed_form):
        tr = self.train[k]
        if closed_form or self.opts.penalty == "l2":
            return ridge_fit(tr, lambdas, tau, replace(self.opts, b_update="closed_form"))
        return admm_fit(tr, lambdas, tau, replace(self.opts, b_update="closed_form"),
                        warm_start=warm)

    def _fold(self, k, lambdas, tau, warm, closed_form):
        fit = self._fit(k, lambdas, tau, warm, closed_form)
        te = self.test[k]
        mu = fit.beta0 + sum((F @ bt for F, bt in zip(te.F, fit.beta)), np.zeros(te.n))
        r = te.y - mu
        if te.has_re:
            A = te.Z.T @ te.Z + tau * te.S_solve
            rhs = te.Z.T @ r
            try:
                if tau == 0:
                    raise np.linalg.LinAlgError
                c = scipy.linalg.cho_factor(A, check_finite=False)
                b = scipy.linalg.cho_solve(c, rhs, check_finite=False)
            except np.linalg.LinAlgError:
                b = np.linalg.pinv(A, rcond=1e-10, hermitian=True) @ rhs
            r = r - te.Z @ b
        return float(r @ r), fit

    def evaluate(self, lambdas, tau: float, warm: Optional[list] = None,
                 closed_form: bool = False) -> CvPoint:
        """Summed squared test error over folds at ``(lambdas, tau)``."""
        warm = warm if warm is not None else [None] * self.plan.K
        args = [(k, lambdas, tau, warm[k], closed_form) for k in range(self.plan.K)]
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                out = list(ex.map(lambda a: self._fold(*a), args))
        else:
            out = [self._fold(*a) for a in args]
        err = float(sum(e for e, _ in out))
        fits = [f for _, f in out]
        conv = all(f.converged for f in fits)
        rho = self.opts.rho_for(np.atleast_1d(lambdas))
        return CvPoint(err, conv, rho, [f.state for f in fits])


def cv_error(bundle: DesignBundle, plan: FoldPlan, lambdas, tau: float,
             opts: AdmmOptions = AdmmOptions()) -> float:
    return CrossValidator(bundle, plan, opts).evaluate(lambdas, tau).error


# ---------------------------------------------------------------------------
# path search


@dataclass
class PathResult:
    parameter: str
    grid: np.ndarray
    cv_error: np.ndarray
    converged: np.ndarray
    rho: np.ndarray
    chosen_index: int
    states: list = field(default_factory=list, repr=False)

    @property
    def chosen(self) -> float:
        return float(self.grid[self.chosen_index])


@dataclass
class TuneResult:
    lambdas: np.ndarray
    tau: float
    paths: list
    plan: FoldPlan


def _choose(errors: np.ndarray, converged: np.ndarray, name: str) -> int:
    usable = converged & np.isfinite(errors)
    if not usable.any():
        warnings.warn(f"no converged point on the {name} path; using all points",
                      stacklevel=3)
        usable = np.isfinite(errors)
        if not usable.any():
            raise CvError(f"cross-validation failed at every {name} value")
    masked = np.where(usable, errors, np.inf)
    # first minimum in a descending grid breaks ties toward more smoothing
    return int(np.argmin(masked))


def _run_path(cv: CrossValidator, name: str, grid, make_params, closed_form: bool):
    errs, conv, rhos, states = [], [], [], []
    warm = None
    for value in grid:
        lambdas, tau = make_params(value)
        pt = cv.evaluate(lambdas, tau, warm, closed_form)
        errs.append(pt.error)
        conv.append(pt.converged)
        rhos.append(pt.rho)
        states.append(pt.states)
        warm = pt.states
    errs = np.array(errs)
    conv = np.array(conv, dtype=bool)
    idx = _choose(errs, conv, name)
    return PathResult(name, np.asarray(grid, dtype=float), errs, conv, np.array(rhos),
                      idx, states)


def tune(bundle: DesignBundle, K: int = 5, path_len: int = 50,
         opts: AdmmOptions = AdmmOptions(), seed: int = 0, plan: Optional[FoldPlan] = None,
         threads: int = 1, lambda_method: str = "kkt") -> TuneResult:
    """One coordinate pass of CV tuning: ``tau`` first, then each ``lambda_j``."""
    plan = plan if plan is not None else make_folds(bundle, K, seed)
    cv = CrossValidator(bundle, plan, opts, threads)
    l2 = opts.penalty == "l2"
    lambdas = np.zeros(bundle.J)
    tau = 0.0
    paths = []
    if bundle.has_re:
        grid = tau_grid(bundle, path_len)
        path = _run_path(cv, "tau", grid, lambda t: (lambdas.copy(), float(t)),
                         closed_form=True)
        paths.append(path)
        tau = path.chosen
    for j in range(bundle.J):
        if l2:
            grid = l2_lambda_grid(bundle, j, path_len)
        else:
            current = ridge_fit(bundle, lambdas, tau) if not lambdas.any() else \
                admm_fit(bundle, lambdas, tau, replace(opts, b_update="closed_form"))
            lmax = lambda_max(bundle, j, current, tau, method=lambda_method)
            if lmax <= 0:
                paths.append(PathResult(f"lambda_{j + 1}", np.zeros(1), np.zeros(1),
                                        np.ones(1, bool), np.zeros(1), 0))
                continue
            grid = lambda_grid(lmax, path_len)

        def params(v, j=j):
            lam = lambdas.copy()
            lam[j] = v
            return lam, tau

        path = _run_path(cv, f"lambda_{j + 1}", grid, params, closed_form=l2)
        paths.append(path)
        lambdas[j] = path.chosen
    return TuneResult(lambdas, tau, paths, plan)
