import math

import numpy as np
import pytest

from l1pspline.admm import AdmmOptions, admm_fit, ridge_fit
from l1pspline.dof import (ESTIMATORS, all_reports, df_restricted, df_ridge, df_stein,
                           re_trace, solve_tau)

from test_admm import TIGHT, make_bundle


def _hat_trace(X, P):
    return float(np.trace(X @ np.linalg.solve(X.T @ X + P, X.T)))


def test_ridge_df_is_trace_of_hat_matrix():
    b = make_bundle(0)
    fit = ridge_fit(b, [2.0], 0.7)
    X = np.hstack([np.ones((b.n, 1)), b.F[0], b.Z])
    p = b.p_prime[0]
    P = np.zeros((X.shape[1],) * 2)
    P[1:1 + p, 1:1 + p] = 2.0 * b.D[0].T @ b.D[0]
    P[1 + p:, 1 + p:] = 0.7 * b.S_solve
    rep = df_ridge(fit, b)
    assert rep.overall == pytest.approx(_hat_trace(X, P), rel=1e-8)
    assert rep.per_smooth[0] < b.p_prime[0]


def test_stein_df_is_trace_on_the_active_subspace():
    b = make_bundle(1)
    fit = admm_fit(b, [0.5], 1.0, TIGHT)
    rep = df_stein(fit, b)
    # with only the active differences free, the fit is a ridge fit in the RE block
    # over the span of the intercept, the restricted smooth and Z
    from scipy.linalg import null_space
    inactive = np.setdiff1d(np.arange(b.D[0].shape[0]), np.flatnonzero(fit.state.w[0]))
    V = b.F[0] @ null_space(b.D[0][inactive])
    X = np.hstack([np.ones((b.n, 1)), V, b.Z])
    P = np.zeros((X.shape[1],) * 2)
    P[-b.q:, -b.q:] = 1.0 * b.S_solve
    assert rep.overall == pytest.approx(_hat_trace(X, P), rel=1e-6)
    assert rep.per_smooth[0] == pytest.approx(b.smooths[0].k + len(fit.active[0]), abs=1e-6)


def test_augmented_convention_counts_one_more_column():
    b = make_bundle(2)
    fit = admm_fit(b, [0.5], 1.0, TIGHT)
    cen = df_restricted(fit, b)
    pap = df_restricted(fit, b, convention="augmented")
    assert pap.per_smooth[0] == pytest.approx(cen.per_smooth[0] + 1)
    assert cen.per_smooth_augmented[0] == pytest.approx(pap.per_smooth[0])
    with pytest.raises(ValueError):
        df_stein(fit, b, convention="other")


def test_all_reports_have_every_estimator_and_ridge_is_largest():
    b = make_bundle(3)
    fit = admm_fit(b, [0.5], 1.0, TIGHT)
    reps = all_reports(fit, b)
    assert tuple(reps) == ESTIMATORS
    assert all(r.ok for r in reps.values())
    assert reps["admm"].per_smooth[0] == reps["restricted"].per_smooth[0]


def test_re_trace_limits():
    b = make_bundle(4)
    assert re_trace(b, 0.0) == b.q
    assert re_trace(b, math.inf) == 0.0
    assert 0 < re_trace(b, 1.0) < b.q
    assert re_trace(b, 1.0) > re_trace(b, 10.0)


def test_unstable_design_is_flagged():
    b = make_bundle(5)
    fit = admm_fit(b, [0.0], 0.0, AdmmOptions(max_iter=50))
    rep = df_stein(fit, b, tau=0.0)     # intercept and full Z are collinear
    assert rep.status == "unstable" and not rep.ok and math.isnan(rep.overall)


@pytest.mark.parametrize("convention", ["consistent", "reciprocal"])
def test_solve_tau_is_a_fixed_point(convention):
    b = make_bundle(6, n_subjects=30)
    fit = admm_fit(b, [0.4], 1.0, AdmmOptions(b_update="lme"))
    tau = solve_tau(fit, b, convention=convention)
    rr = float(fit.residuals @ fit.residuals)
    resid_df = b.n - df_stein(fit, b, tau).overall
    if convention == "consistent":
        assert tau == pytest.approx(rr / (fit.sigma2_b * resid_df), rel=1e-6)
    else:
        assert tau == pytest.approx(fit.sigma2_b * resid_df / rr, rel=1e-6)


def test_solve_tau_without_random_effect_variance():
    b = make_bundle(7)
    fit = admm_fit(b, [0.4], 1.0)
    fit.sigma2_b = 0.0
    assert solve_tau(fit, b) == math.inf
    assert solve_tau(fit, b, convention="reciprocal") == 0.0
