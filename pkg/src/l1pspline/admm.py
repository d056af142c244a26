"""ADMM solver for the l1-penalized additive mixed model.

The objective is

    1/2 ||y - b0 - sum_j F_j beta_j - Z b||^2 + sum_j lam_j ||D_j beta_j||_1
        + tau/2 b' S b

split through the constraints ``D_j beta_j = w_j``. By default the
coefficient blocks (intercept, smooths, random effects) are updated jointly by
one linear solve, followed by the w and u updates; ``x_update="sequential"``
updates the coefficient blocks one at a time in that order instead. All blocks
are small, so every update works on the Gram matrix of
``[1, F_1, ..., F_J, Z]`` and an iteration costs nothing in ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from .model import DesignBundle

JITTER_START = 1e-10
JITTER_MAX = 1e-6
PIVOT_RTOL = 1e-13
LOG_TAU_BOUNDS = (-18.0, 18.0)


class SolverError(RuntimeError):
    """A linear system stayed singular after jitter escalation."""


@dataclass(frozen=True)
class AdmmOptions:
    rho: Optional[float] = None        # None: rho = min(max lambda, rho_cap)
    rho_cap: float = 5.0
    rho_min: float = 1e-6
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    max_iter: int = 1000
    b_update: str = "closed_form"      # or "lme"
    penalty: str = "l1"                # "l2" swaps in the quadratic penalty
    check_fitted: bool = True
    x_update: str = "joint"            # or "sequential" block Gauss-Seidel

    def __post_init__(self):
        if self.b_update not in ("closed_form", "lme"):
            raise ValueError(f"unknown b_update {self.b_update!r}")
        if self.x_update not in ("joint", "sequential"):
            raise ValueError(f"unknown x_update {self.x_update!r}")
        if self.penalty not in ("l1", "l2"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.eps_abs <= 0 or self.eps_rel < 0 or self.max_iter < 1:
            raise ValueError("tolerances must be positive and max_iter >= 1")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")

    def rho_for(self, lambdas) -> float:
        if self.rho is not None:
            return float(self.rho)
        lam = max((float(v) for v in lambdas), default=0.0)
        return max(min(lam, self.rho_cap), self.rho_min)


@dataclass
class AdmmState:
    beta0: float
    beta: list
    b: np.ndarray
    w: list
    u: list
    rho: float
    iter: int = 0
    r_norm: float = math.inf
    s_norm: float = math.inf
    converged: bool = False

    def copy(self) -> "AdmmState":
        return AdmmState(self.beta0, [v.copy() for v in self.beta], self.b.copy(),
                         [v.copy() for v in self.w], [v.copy() for v in self.u],
                         self.rho, self.iter, self.r_norm, self.s_norm, self.converged)

    def rescaled(self, rho: float) -> "AdmmState":
        """Warm start for a new rho; scaled duals move by ``rho_old / rho``."""
        out = self.copy()
        if rho != self.rho:
            out.u = [v * (self.rho / rho) for v in out.u]
            out.rho = rho
        out.iter = 0
        out.converged = False
        return out


@dataclass
class FitResult:
    state: AdmmState
    lambdas: np.ndarray
    tau: float
    sigma2_eps: float
    sigma2_b: float
    fitted: np.ndarray
    residuals: np.ndarray
    options: AdmmOptions
    active: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.state.converged

    @property
    def iterations(self) -> int:
        return self.state.iter

    @property
    def beta0(self) -> float:
        return self.state.beta0

    @property
    def beta(self) -> list:
        return self.state.beta

    @property
    def b(self) -> np.ndarray:
        return self.state.b

    @property
    def rho(self) -> float:
        return self.state.rho


class LmeResult(NamedTuple):
    b: np.ndarray
    sigma2_b: float
    sigma2_eps: float
    tau: float


def soft_threshold(x, t: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def spd_inverse(A: np.ndarray, what: str = "system") -> np.ndarray:
    """Inverse of a symmetric positive (semi)definite matrix via Cholesky.

    A diagonal jitter relative to the mean diagonal starts at 1e-10 and grows
    tenfold up to 1e-6 before giving up.
    """
    A = 0.5 * (A + A.T)
    m = A.shape[0]
    if m == 0:
        return np.zeros((0, 0))
    diag = np.diag(A)
    scale = max(float(np.mean(diag)), np.finfo(float).tiny)
    top = max(float(np.max(diag)), np.finfo(float).tiny)
    eye = np.eye(m)

    def attempt(M):
        c = scipy.linalg.cho_factor(M, check_finite=False)
        # a factorization with a vanishing pivot is singular in all but name
        if float(np.min(np.abs(np.diag(c[0])))) ** 2 < PIVOT_RTOL * top:
            raise np.linalg.LinAlgError("near-zero pivot")
        return scipy.linalg.cho_solve(c, eye, check_finite=False)

    try:
        return attempt(A)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return attempt(A + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    cond = np.linalg.cond(A)
    raise SolverError(f"{what} is singular (condition estimate {cond:.3g})")


# ---------------------------------------------------------------------------
# cached per-bundle quantities


def _cache(bundle: DesignBundle) -> dict:
    # only y-independent quantities live here, so with_y copies share it
    return bundle.__dict__.setdefault("_solver_cache", {})


def full_design(bundle: DesignBundle):
    """``X = [1, F_1, ..., F_J, Z]``, its Gram matrix and block slices."""
    c = _cache(bundle)
    if "X" not in c:
        blocks = [np.ones((bundle.n, 1))] + list(bundle.F) + [bundle.Z]
        X = np.hstack(blocks)
        sl, start = [], 0
        for blk in blocks:
            sl.append(slice(start, start + blk.shape[1]))
            start += blk.shape[1]
        c["X"] = X
        c["G"] = X.T @ X
        c["slices"] = sl
    return c["X"], c["G"], c["slices"]


class _LmeCache(NamedTuple):
    Lt_inv_W: np.ndarray   # q x q, maps rotated coordinates back to b
    Gm: np.ndarray         # n x q = Z L^{-T} W, with Gm' Gm = diag(d)
    d: np.ndarray
    g1: np.ndarray


def _lme_cache(bundle: DesignBundle) -> _LmeCache:
    c = _cache(bundle)
    if "lme" not in c:
        L = np.linalg.cholesky(0.5 * (bundle.S_solve + bundle.S_solve.T))
        C = scipy.linalg.solve_triangular(L, bundle.Z.T, lower=True).T   # Z L^{-T}
        d, W = np.linalg.eigh(C.T @ C)
        d = np.maximum(d, 0.0)
        Gm = C @ W
        Lt_inv_W = scipy.linalg.solve_triangular(L.T, W, lower=False)
        c["lme"] = _LmeCache(Lt_inv_W, Gm, d, Gm.sum(axis=0))
    return c["lme"]


def _reml_objective(log_tau, n, q, d, g1, gr, sum_r, rr):
    tau = math.exp(log_tau)
    inv = 1.0 / (d + tau)
    one_h_one = n - np.dot(g1 * g1, inv)
    one_h_r = sum_r - np.dot(g1 * gr, inv)
    r_h_r = rr - np.dot(gr * gr, inv)
    Q = r_h_r - one_h_r ** 2 / one_h_one
    Q = max(Q, 1e-300)
    s2 = Q / (n - 1)
    return ((n - 1) * math.log(s2) + float(np.sum(np.log(d + tau))) - q * log_tau
            + math.log(one_h_one))


def lme_update(bundle: DesignBundle, partial_residuals) -> LmeResult:
    """REML fit of ``r = a 1 + Z b + e`` with ``b ~ N(0, s2_b S^-1)``.

    Searches ``tau = s2_eps / s2_b`` over log tau in [-18, 18] and returns the
    BLUP of ``b`` at the optimum together with both variance estimates.
    """
    r = np.asarray(partial_residuals, dtype=float)
    n, q = bundle.n, bundle.q
    if q == 0:
        raise ValueError("model has no random effects")
    if n < 2:
        raise ValueError("need at least two observations")
    rr = float(r @ r)
    if rr == 0.0:
        return LmeResult(np.zeros(q), 0.0, 0.0, math.inf)
    lc = _lme_cache(bundle)
    gr = lc.Gm.T @ r
    sum_r = float(r.sum())
    res = minimize_scalar(_reml_objective, bounds=LOG_TAU_BOUNDS, method="bounded",
                          args=(n, q, lc.d, lc.g1, gr, sum_r, rr),
                          options={"xatol": 1e-6})
    log_tau = float(res.x)
    # compare against the bracket ends, where the bounded search can stall
    for end in LOG_TAU_BOUNDS:
        if _reml_objective(end, n, q, lc.d, lc.g1, gr, sum_r, rr) < res.fun:
            log_tau = end
    tau = math.exp(log_tau)
    inv = 1.0 / (lc.d + tau)
    one_h_one = n - np.dot(lc.g1 * lc.g1, inv)
    one_h_r = sum_r - np.dot(lc.g1 * gr, inv)
    alpha = one_h_r / one_h_one
    Q = (rr - np.dot(gr * gr, inv)) - one_h_r ** 2 / one_h_one
    s2 = max(Q, 0.0) / (n - 1)
    gr_c = gr - alpha * lc.g1
    b = lc.Lt_inv_W @ (gr_c * inv)
    return LmeResult(b, s2 / tau, s2, tau)


# ---------------------------------------------------------------------------
# the solver


def initial_state(bundle: DesignBundle, rho: float) -> AdmmState:
    return AdmmState(
        beta0=float(np.mean(bundle.y)),
        beta=[np.zeros(f.shape[1]) for f in bundle.F],
        b=np.zeros(bundle.q),
        w=[np.zeros(d.shape[0]) for d in bundle.D],
        u=[np.zeros(d.shape[0]) for d in bundle.D],
        rho=rho)


def _check_inputs(bundle, lambdas, tau):
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lam.shape != (bundle.J,):
        raise ValueError(f"expected {bundle.J} smoothing parameters, got {lam.size}")
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("smoothing parameters must be finite and nonnegative")
    tau = float(tau)
    if not tau >= 0:
        raise ValueError("tau must be nonnegative")
    return lam, tau


def _theta(state: AdmmState, slices) -> np.ndarray:
    parts = [np.array([state.beta0])] + list(state.beta) + [state.b]
    return np.concatenate(parts)


def admm_fit(bundle: DesignBundle, lambdas, tau: float = 0.0,
             opts: AdmmOptions = AdmmOptions(),
             warm_start: Optional[AdmmState] = None) -> FitResult:
    """Fit the model at fixed smoothing parameters.

    Convergence requires the primal and dual residuals of the splitting to be
    within their tolerances and, with ``opts.check_fitted``, the fitted values
    to have stopped moving at the same absolute/relative tolerance. A fit that
    runs out of iterations is returned with ``converged=False``.
    """
    lam, tau = _check_inputs(bundle, lambdas, tau)
    l2 = opts.penalty == "l2"
    use_lme = opts.b_update == "lme" and bundle.has_re
    rho = opts.rho_for(lam)
    X, G, sl = full_design(bundle)
    Xty = X.T @ bundle.y
    n, J = bundle.n, bundle.J
    sb = sl[-1]
    sj = sl[1:-1]

    joint = opts.x_update == "joint"
    pen_D = [(lam[j] if l2 else rho) * (bundle.D[j].T @ bundle.D[j]) for j in range(J)]
    # fixed-effect columns updated by linear solves; with LME the b block is not
    nf = sb.start if use_lme else G.shape[0]
    Kinv, Rinv, Ainv = [], None, None
    if joint:
        P = np.zeros((nf, nf))
        for j, s in enumerate(sj):
            P[s, s] = pen_D[j]
        if bundle.has_re and not use_lme:
            P[sb, sb] = tau * bundle.S_solve
        Ainv = spd_inverse(G[:nf, :nf] + P, "normal matrix")
    else:
        for j in range(J):
            Kinv.append(spd_inverse(G[sj[j], sj[j]] + pen_D[j], f"smooth {j} normal matrix"))
        if bundle.has_re and not use_lme:
            Rinv = spd_inverse(G[sb, sb] + tau * bundle.S_solve, "random-effect system")

    state = (warm_start.rescaled(rho) if warm_start is not None
             else initial_state(bundle, rho))
    theta = _theta(state, sl)
    lme_res = None
    p_tot = sum(bundle.p_prime)
    m_tot = sum(d.shape[0] for d in bundle.D)
    yy_scale = math.sqrt(n)

    it = 0
    for it in range(1, opts.max_iter + 1):
        theta_old = theta.copy()
        if joint:
            rhs = Xty[:nf] - G[:nf, nf:] @ theta[nf:]
            if not l2:
                for j, s in enumerate(sj):
                    rhs[s] += rho * (bundle.D[j].T @ (state.w[j] - state.u[j]))
            theta[:nf] = Ainv @ rhs
        else:
            theta[0] = (Xty[0] - G[0, 1:] @ theta[1:]) / n
            for j in range(J):
                s = sj[j]
                rhs = Xty[s] - G[s] @ theta + G[s, s] @ theta[s]
                if not l2:
                    rhs = rhs + rho * (bundle.D[j].T @ (state.w[j] - state.u[j]))
                theta[s] = Kinv[j] @ rhs
            if Rinv is not None:
                rhs = Xty[sb] - G[sb] @ theta + G[sb, sb] @ theta[sb]
                theta[sb] = Rinv @ rhs
        if use_lme:
            fixed = X[:, :sb.start] @ theta[:sb.start]
            lme_res = lme_update(bundle, bundle.y - fixed)
            theta[sb] = lme_res.b
        # splitting variables
        r_sq = s_sq = dbeta_sq = w_sq = dtu_sq = 0.0
        if not l2:
            for j in range(J):
                db = bundle.D[j] @ theta[sj[j]]
                w_old = state.w[j]
                w_new = soft_threshold(db + state.u[j], lam[j] / rho)
                u_new = state.u[j] + db - w_new
                r_sq += float(np.sum((db - w_new) ** 2))
                s_sq += float(np.sum((bundle.D[j].T @ (w_new - w_old)) ** 2))
                dbeta_sq += float(db @ db)
                w_sq += float(w_new @ w_new)
                dtu_sq += float(np.sum((bundle.D[j].T @ u_new) ** 2))
                state.w[j], state.u[j] = w_new, u_new
        r_norm = math.sqrt(r_sq)
        s_norm = rho * math.sqrt(s_sq)
        eps_pri = opts.eps_abs * math.sqrt(max(m_tot, 1)) + opts.eps_rel * math.sqrt(max(dbeta_sq, w_sq))
        eps_dual = opts.eps_abs * math.sqrt(max(p_tot, 1)) + opts.eps_rel * rho * math.sqrt(dtu_sq)
        done = r_norm <= eps_pri and s_norm <= eps_dual
        if done and (opts.check_fitted or l2):
            dth = theta - theta_old
            change = math.sqrt(max(float(dth @ G @ dth), 0.0))
            size = math.sqrt(max(float(theta @ G @ theta), 0.0))
            done = change <= opts.eps_abs * yy_scale + opts.eps_rel * size
        state.r_norm, state.s_norm = r_norm, s_norm
        if done:
            state.converged = True
            break

    state.iter = it
    state.beta0 = float(theta[0])
    state.beta = [theta[s].copy() for s in sj]
    state.b = theta[sb].copy()
    return _finish(bundle, state, lam, tau, opts, lme_res)


def _finish(bundle, state, lam, tau, opts, lme_res) -> FitResult:
    fitted = state.beta0 + sum((F @ bt for F, bt in zip(bundle.F, state.beta)),
                               np.zeros(bundle.n))
    if bundle.has_re:
        fitted = fitted + bundle.Z @ state.b
    resid = bundle.y - fitted
    active = [np.flatnonzero(w) for w in state.w]
    if lme_res is not None:
        tau_out, s2e, s2b = lme_res.tau, lme_res.sigma2_eps, lme_res.sigma2_b
    else:
        tau_out = tau
        crude_df = 1 + sum(int(not sm.centered) + sm.k + len(a)
                           for sm, a in zip(bundle.smooths, active))
        s2e = float(resid @ resid) / max(bundle.n - crude_df, 1)
        if not bundle.has_re:
            s2b = 0.0
        else:
            s2b = s2e / tau if tau > 0 else math.inf
    return FitResult(state=state, lambdas=np.array(lam, dtype=float), tau=float(tau_out),
                     sigma2_eps=float(s2e), sigma2_b=float(s2b), fitted=fitted,
                     residuals=resid, options=opts, active=active)


def ridge_fit(bundle: DesignBundle, lambdas, tau: float = 0.0,
              opts: AdmmOptions = AdmmOptions(penalty="l2")) -> FitResult:
    """Quadratic-penalty fit ``(lam_j / 2) ||D_j beta_j||^2`` in one joint solve.

    With ``opts.b_update == "lme"`` and random effects present the random
    effects are re-estimated by REML, which needs block iteration instead.
    """
    lam, tau = _check_inputs(bundle, lambdas, tau)
    opts = replace(opts, penalty="l2")
    if opts.b_update == "lme" and bundle.has_re:
        return admm_fit(bundle, lam, tau, opts)
    X, G, sl = full_design(bundle)
    P = np.zeros_like(G)
    for j, s in enumerate(sl[1:-1]):
        P[s, s] = lam[j] * (bundle.D[j].T @ bundle.D[j])
    if bundle.has_re:
        P[sl[-1], sl[-1]] = tau * bundle.S_solve
    A = G + P
    theta = spd_inverse(A, "ridge system") @ (X.T @ bundle.y)
    state = initial_state(bundle, opts.rho_for(lam))
    state.beta0 = float(theta[0])
    state.beta = [theta[s].copy() for s in sl[1:-1]]
    state.b = theta[sl[-1]].copy()
    state.converged = True
    state.iter = 1
    state.r_norm = state.s_norm = 0.0
    return _finish(bundle, state, lam, tau, opts, None)


def delta_j(fit: FitResult, bundle: DesignBundle, j: int) -> np.ndarray:
    """``rho (F'F + rho D'D)^-1 D'(w - u)``: the part of the beta update
    contributed by the splitting variables."""
    st = fit.state
    rho = st.rho
    F, D = bundle.F[j], bundle.D[j]
    K = F.T @ F + rho * (D.T @ D)
    return rho * (spd_inverse(K) @ (D.T @ (st.w[j] - st.u[j])))


def objective(fit: FitResult, bundle: DesignBundle) -> float:
    r = bundle.y - fit.fitted
    val = 0.5 * float(r @ r)
    for lam, D, bt in zip(fit.lambdas, bundle.D, fit.beta):
        if fit.options.penalty == "l1":
            val += lam * float(np.sum(np.abs(D @ bt)))
        else:
            val += 0.5 * lam * float(np.sum((D @ bt) ** 2))
    if bundle.has_re and math.isfinite(fit.tau):
        val += 0.5 * fit.tau * float(fit.b @ bundle.S @ fit.b)
    return val


def smooth_values(fit: FitResult, bundle: DesignBundle, j: int) -> np.ndarray:
    return bundle.F[j] @ fit.beta[j]
