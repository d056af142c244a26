import numpy as np
import pandas as pd
import pytest

from l1pspline.model import (ModelSpec, RandomEffectSpec, SmoothSpec, SpecError, build_bundle,
                             psd_pinv, rotate_semidefinite, smooth_grid_design)
from l1pspline.splinebasis import make_basis


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    s = np.repeat(np.arange(8), 5)
    x = rng.uniform(0, 1, s.size)
    g = (s % 2).astype(float)
    return pd.DataFrame({"id": s, "x": x, "g": g, "y": np.sin(3 * x) + g + 0.1 * s})


def test_centered_smooth_sums_to_zero(data):
    b = build_bundle(ModelSpec("y", "id", (SmoothSpec("x", num_basis=10),)), data)
    assert b.F[0].shape == (40, 9)
    assert np.allclose(b.F[0].sum(axis=0), 0.0, atol=1e-10)
    assert np.allclose(b.F[0], b.F_tilde[0] @ b.Q[0])
    assert np.allclose(b.D[0], b.D_tilde[0] @ b.Q[0])
    assert b.n == 40 and b.q == 8 and b.J == 1 and b.p_prime == [9]


def test_varying_smooth_is_multiplied_and_uncentered(data):
    spec = ModelSpec("y", "id", (SmoothSpec("x"), SmoothSpec("x", varying_multiplier="g")),
                     factors=("g",))
    b = build_bundle(spec, data)
    assert b.Q[1] is None
    assert np.allclose(b.F[1], data["g"].to_numpy()[:, None] * b.F_tilde[0])
    assert sorted(np.unique(b.strata)) == [0, 1]


def test_random_intercepts_design(data):
    b = build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),)), data)
    assert np.array_equal(b.Z.sum(axis=1), np.ones(40))
    assert np.array_equal(b.Z.sum(axis=0), np.full(8, 5.0))
    assert np.array_equal(b.S, np.eye(8))


def test_spline_curve_random_effects(data):
    basis = make_basis(4, 5, (0.0, 1.0))
    spec = ModelSpec("y", "id", (SmoothSpec("x"),), RandomEffectSpec("spline_curves", "x", basis))
    b = build_bundle(spec, data)
    assert b.q == 8 * 5
    assert np.linalg.eigvalsh(b.S).min() > -1e-9
    assert np.linalg.eigvalsh(b.S_solve).min() > 0


def test_subset_keeps_whole_subjects(data):
    b = build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),)), data)
    sub = b.subset([1, 3, 4])
    assert sub.n == 15 and sub.q == 3 and sub.n_subjects == 3
    assert np.array_equal(sub.subject_labels, [1, 3, 4])


def test_missing_column_is_named(data):
    with pytest.raises(SpecError, match="'yy'"):
        build_bundle(ModelSpec("yy", "id", (SmoothSpec("x"),)), data)


def test_bad_value_reports_row(data):
    bad = data.astype({"x": object})
    bad.loc[6, "x"] = "oops"
    with pytest.raises(SpecError, match="row 7"):
        build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),)), bad)
    nan = data.copy()
    nan.loc[2, "y"] = np.nan
    with pytest.raises(SpecError, match="row 3"):
        build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),)), nan)


def test_factor_varying_within_subject_is_rejected(data):
    d = data.copy()
    d.loc[0, "g"] = 5.0
    with pytest.raises(SpecError, match="vary within subject"):
        build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),), factors=("g",)), d)


def test_spec_validation():
    with pytest.raises(SpecError):
        SmoothSpec("x", order=4, num_basis=3)
    with pytest.raises(SpecError):
        SmoothSpec("x", num_basis=5, diff_order=5)
    with pytest.raises(SpecError):
        ModelSpec("y", "id", (), None)
    with pytest.raises(SpecError):
        RandomEffectSpec("slopes")


def test_constant_covariate_needs_domain():
    d = {"y": np.arange(6.0), "id": np.arange(6), "x": np.ones(6)}
    with pytest.raises(SpecError, match="constant"):
        build_bundle(ModelSpec("y", "id", (SmoothSpec("x"),)), d)


def test_grid_design_uses_same_coordinates(data):
    b = build_bundle(ModelSpec("y", "id", (SmoothSpec("x", num_basis=8),)), data)
    x = data["x"].to_numpy()
    assert np.allclose(smooth_grid_design(b, 0, x), b.F[0])


def test_semidefinite_rotation_and_pinv():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((6, 3))
    S = A @ A.T
    rot = rotate_semidefinite(rng.standard_normal((4, 6)), S)
    assert rot.q_r == 3 and rot.q_f == 3
    P = psd_pinv(S)
    assert np.allclose(P, np.linalg.pinv(S), atol=1e-10)
