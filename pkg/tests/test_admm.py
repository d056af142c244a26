import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from l1pspline.admm import (AdmmOptions, SolverError, admm_fit, lme_update, objective,
                            ridge_fit, soft_threshold, spd_inverse)
from l1pspline.model import ModelSpec, RandomEffectSpec, SmoothSpec, build_bundle

TIGHT = AdmmOptions(eps_abs=1e-10, eps_rel=1e-10, max_iter=100_000)


def make_bundle(seed=0, n_subjects=12, re=True, num_basis=12, diff_order=2):
    rng = np.random.default_rng(seed)
    s = np.repeat(np.arange(n_subjects), rng.integers(3, 8, n_subjects))
    x = rng.uniform(0, 1, s.size)
    y = (1 + 2 * np.abs(x - 0.4) + rng.normal(0, 0.8, n_subjects)[s]
         + 0.15 * rng.standard_normal(s.size))
    spec = ModelSpec("y", "s", (SmoothSpec("x", num_basis=num_basis, diff_order=diff_order),),
                     RandomEffectSpec() if re else None)
    return build_bundle(spec, {"y": y, "s": s, "x": x})


finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 1e3))
def test_soft_threshold_shrinks(xs, t):
    x = np.array(xs)
    out = soft_threshold(x, t)
    assert np.all(np.abs(out) <= np.abs(x) + 1e-12)
    assert np.all(out * x >= 0)
    assert np.array_equal(out == 0, np.abs(x) <= t)
    assert np.allclose(np.abs(x) - np.abs(out), np.minimum(np.abs(x), t))


@given(finite, finite, st.floats(0, 100))
def test_soft_threshold_is_nonexpansive(a, b, t):
    fa, fb = soft_threshold([a], t)[0], soft_threshold([b], t)[0]
    assert abs(fa - fb) <= abs(a - b) * (1 + 1e-12) + 1e-9


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ValueError):
        soft_threshold([1.0], -1.0)


def test_spd_inverse_regular_singular_and_indefinite():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    A = A @ A.T + np.eye(6)
    assert np.allclose(spd_inverse(A) @ A, np.eye(6), atol=1e-10)
    B = rng.standard_normal((6, 3))
    S = B @ B.T                                   # rank 3: jitter makes it solvable
    assert np.all(np.isfinite(spd_inverse(S)))
    with pytest.raises(SolverError):
        spd_inverse(-np.eye(3))


def test_options_validation():
    for kw in ({"b_update": "x"}, {"penalty": "l0"}, {"x_update": "x"}, {"eps_abs": 0},
               {"max_iter": 0}, {"rho": -1.0}):
        with pytest.raises(ValueError):
            AdmmOptions(**kw)
    o = AdmmOptions()
    assert o.rho_for([0.5, 2.0]) == 2.0
    assert o.rho_for([100.0]) == 5.0
    assert o.rho_for([0.0]) == 1e-6


def test_fit_rejects_bad_parameters():
    b = make_bundle()
    with pytest.raises(ValueError):
        admm_fit(b, [-1.0], 1.0)
    with pytest.raises(ValueError):
        admm_fit(b, [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        admm_fit(b, [1.0], -1.0)


def test_l1_fit_matches_convex_solver():
    cp = pytest.importorskip("cvxpy")
    b = make_bundle(1)
    lam, tau = 0.7, 2.0
    fit = admm_fit(b, [lam], tau, TIGHT)
    assert fit.converged
    b0, beta, re = cp.Variable(), cp.Variable(b.p_prime[0]), cp.Variable(b.q)
    resid = b.y - b0 - b.F[0] @ beta - b.Z @ re
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(resid) + lam * cp.norm1(b.D[0] @ beta)
                                  + 0.5 * tau * cp.sum_squares(re)))
    prob.solve()
    assert objective(fit, b) <= prob.value + 1e-6
    ref = b0.value + b.F[0] @ beta.value + b.Z @ re.value
    assert np.sqrt(np.mean((fit.fitted - ref) ** 2)) < 1e-3


def test_joint_and_sequential_updates_agree():
    b = make_bundle(2)
    f1 = admm_fit(b, [0.5], 1.0, TIGHT)
    f2 = admm_fit(b, [0.5], 1.0, AdmmOptions(eps_abs=1e-10, eps_rel=1e-10, max_iter=200_000,
                                            x_update="sequential"))
    assert f1.converged and f2.converged
    assert np.allclose(f1.fitted, f2.fitted, atol=1e-5)


def test_ridge_fit_solves_normal_equations():
    b = make_bundle(3)
    lam, tau = 3.0, 0.5
    fit = ridge_fit(b, [lam], tau)
    X = np.hstack([np.ones((b.n, 1)), b.F[0], b.Z])
    P = np.zeros((X.shape[1],) * 2)
    p = b.p_prime[0]
    P[1:1 + p, 1:1 + p] = lam * b.D[0].T @ b.D[0]
    P[1 + p:, 1 + p:] = tau * b.S_solve
    theta = np.linalg.solve(X.T @ X + P, X.T @ b.y)
    assert np.allclose(fit.fitted, X @ theta, atol=1e-9)


def test_l2_admm_matches_ridge():
    b = make_bundle(4)
    f1 = admm_fit(b, [2.0], 1.0, AdmmOptions(penalty="l2", eps_abs=1e-10, eps_rel=1e-10))
    f2 = ridge_fit(b, [2.0], 1.0)
    assert np.allclose(f1.fitted, f2.fitted, atol=1e-8)


def test_solution_is_a_minimum():
    b = make_bundle(5)
    fit = admm_fit(b, [0.4], 1.0, TIGHT)
    base = objective(fit, b)
    rng = np.random.default_rng(0)
    for _ in range(20):
        trial = admm_fit(b, [0.4], 1.0, AdmmOptions(max_iter=1))
        trial.state.beta = [fit.beta[0] + 1e-3 * rng.standard_normal(fit.beta[0].size)]
        trial.state.b = fit.b + 1e-3 * rng.standard_normal(b.q)
        trial.state.beta0 = fit.beta0
        trial.fitted = (trial.beta0 + b.F[0] @ trial.beta[0] + b.Z @ trial.b)
        assert objective(trial, b) >= base - 1e-9


def test_warm_start_saves_iterations():
    b = make_bundle(6)
    cold = admm_fit(b, [0.5], 1.0)
    warm = admm_fit(b, [0.45], 1.0, warm_start=cold.state)
    fresh = admm_fit(b, [0.45], 1.0)
    assert warm.converged and fresh.converged
    assert warm.iterations < fresh.iterations
    assert np.allclose(warm.fitted, fresh.fitted, atol=1e-2)


def test_iteration_cap_reports_nonconvergence():
    fit = admm_fit(make_bundle(7), [0.5], 1.0, AdmmOptions(max_iter=2))
    assert not fit.converged and fit.iterations == 2


def _dense_reml(r, Z):
    n = r.size
    one = np.ones(n)

    def crit(log_tau):
        H = np.eye(n) + Z @ Z.T / math.exp(log_tau)
        Hi = np.linalg.inv(H)
        oho = one @ Hi @ one
        alpha = one @ Hi @ r / oho
        e = r - alpha
        s2 = e @ Hi @ e / (n - 1)
        return (n - 1) * math.log(s2) + np.linalg.slogdet(H)[1] + math.log(oho)

    grid = np.linspace(-10, 10, 201)
    start = grid[np.argmin([crit(g) for g in grid])]
    res = minimize_scalar(crit, bounds=(start - 0.2, start + 0.2), method="bounded",
                          options={"xatol": 1e-9})
    tau = math.exp(res.x)
    H = np.eye(n) + Z @ Z.T / tau
    Hi = np.linalg.inv(H)
    alpha = one @ Hi @ r / (one @ Hi @ one)
    b = Z.T @ Hi @ (r - alpha) / tau
    return tau, b


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lme_update_matches_dense_reml(seed):
    b = make_bundle(seed, n_subjects=10)
    rng = np.random.default_rng(seed)
    r = 0.5 + rng.normal(0, 1.0, b.q)[b.subject] + 0.5 * rng.standard_normal(b.n)
    res = lme_update(b, r)
    tau, blup = _dense_reml(r, b.Z)
    assert res.tau == pytest.approx(tau, rel=1e-3)
    assert np.allclose(res.b, blup, atol=1e-4)
    assert res.sigma2_b == pytest.approx(res.sigma2_eps / res.tau)


def test_lme_update_zero_residuals():
    b = make_bundle(0)
    res = lme_update(b, np.zeros(b.n))
    assert res.tau == math.inf and np.all(res.b == 0)


def test_lme_fit_estimates_variances():
    b = make_bundle(8, n_subjects=40)
    fit = admm_fit(b, [0.3], 1.0, AdmmOptions(b_update="lme"))
    assert fit.converged
    assert 0.005 < fit.sigma2_eps < 0.05
    assert 0.2 < fit.sigma2_b < 2.0
