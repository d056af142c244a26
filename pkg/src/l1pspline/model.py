"""Design assembly for the additive mixed model.

A :class:`DesignBundle` holds everything the solvers need: smooth designs
(centered through ``Q_j`` for standard smooths), their difference penalties,
the block-diagonal random-effects design ``Z`` and penalty ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .splinebasis import (BasisSpec, centering_transform, design_matrix,
                          diff_matrix, make_basis, spline_curve_penalty)

RANK_TOL = 1e-10
NULL_RIDGE = 1e-8


class SpecError(ValueError):
    """Invalid model specification or data."""


@dataclass(frozen=True)
class SmoothSpec:
    """One smooth term.

    ``domain=None`` spans the observed range of the covariate. A smooth with a
    ``varying_multiplier`` is multiplied row-wise by that column and left
    uncentered.
    """
    covariate: str
    order: int = 2
    num_basis: int = 21
    diff_order: int = 2
    varying_multiplier: Optional[str] = None
    domain: Optional[tuple] = None

    def __post_init__(self):
        if self.order < 1 or self.num_basis < self.order:
            raise SpecError(f"need 1 <= order <= num_basis, got order={self.order}, "
                            f"num_basis={self.num_basis}")
        if not 1 <= self.diff_order <= self.num_basis - 1:
            raise SpecError(f"diff_order {self.diff_order} invalid for "
                            f"{self.num_basis} basis functions")
        if self.domain is not None:
            object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))

    @property
    def centered(self) -> bool:
        return self.varying_multiplier is None

    @property
    def k(self) -> int:
        return self.diff_order - 1

    def basis_for(self, x) -> BasisSpec:
        if self.domain is not None:
            return make_basis(self.order, self.num_basis, self.domain)
        x = np.asarray(x, dtype=float)
        lo, hi = float(np.min(x)), float(np.max(x))
        if not hi > lo:
            raise SpecError(f"covariate {self.covariate!r} is constant; give a domain")
        return make_basis(self.order, self.num_basis, (lo, hi))


@dataclass(frozen=True)
class RandomEffectSpec:
    kind: str = "intercepts"
    covariate: Optional[str] = None
    basis: Optional[BasisSpec] = None

    def __post_init__(self):
        if self.kind not in ("intercepts", "spline_curves"):
            raise SpecError(f"unknown random effect kind {self.kind!r}")
        if self.kind == "spline_curves" and (self.basis is None or self.covariate is None):
            raise SpecError("spline_curves random effects need a covariate and a basis")


@dataclass(frozen=True)
class ModelSpec:
    response: str
    subject: str
    smooths: tuple = ()
    random_effects: Optional[RandomEffectSpec] = field(default_factory=RandomEffectSpec)
    factors: tuple = ()
    center_random_effects: bool = False

    def __post_init__(self):
        object.__setattr__(self, "smooths", tuple(self.smooths))
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.smooths and self.random_effects is None:
            raise SpecError("model needs at least one smooth or random-effect term")


@dataclass(frozen=True)
class RotatedRE:
    eigenvalues: np.ndarray      # positive part, descending
    U: np.ndarray                # full eigenvector matrix, descending order
    Z_r: np.ndarray
    Z_f: np.ndarray

    @property
    def q_r(self) -> int:
        return len(self.eigenvalues)

    @property
    def q_f(self) -> int:
        return self.Z_f.shape[1]


def rotate_semidefinite(Z: np.ndarray, S: np.ndarray) -> RotatedRE:
    """Eigen-rotate ``(Z, S)`` into penalized and unpenalized blocks."""
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, S.T, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise SpecError("S must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    top = max(vals[0], 0.0) if vals.size else 0.0
    if vals.size and vals[-1] < -1e-8 * top:
        raise SpecError(f"S is not positive semidefinite (eigenvalue {vals[-1]:.3g})")
    q_r = int(np.sum(vals > RANK_TOL * top)) if top > 0 else 0
    Zb = np.asarray(Z, dtype=float) @ vecs
    return RotatedRE(vals[:q_r].copy(), vecs, Zb[:, :q_r], Zb[:, q_r:])


def psd_pinv(S: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse at the shared rank tolerance."""
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    top = vals.max() if vals.size else 0.0
    if top <= 0:
        return np.zeros_like(S)
    keep = vals > RANK_TOL * top
    return (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T


@dataclass(eq=False)
class DesignBundle:
    y: np.ndarray
    F: list                      # n x p'_j
    F_tilde: list                # n x p_j (multiplier applied, uncentered)
    D: list                      # (p_j - k_j - 1) x p'_j
    D_tilde: list
    bases: list                  # realized BasisSpec per smooth
    Q: list                      # p_j x (p_j - 1), or None for varying smooths
    smooths: tuple
    Z: np.ndarray                # n x q
    S: np.ndarray                # q x q, PSD
    S_solve: np.ndarray          # S plus a small ridge on its null space
    subject: np.ndarray          # per-row subject code 0..N-1
    z_subject: np.ndarray        # per-column subject code of Z
    subject_labels: np.ndarray
    strata: np.ndarray           # per-subject factor-combination code
    x: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def J(self) -> int:
        return len(self.F)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_labels)

    @property
    def has_re(self) -> bool:
        return self.q > 0

    @property
    def k(self) -> list:
        return [s.k for s in self.smooths]

    @property
    def p_prime(self) -> list:
        return [f.shape[1] for f in self.F]

    def with_y(self, y) -> "DesignBundle":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError("replacement response has the wrong length")
        out = replace(self, y=y)
        if "_solver_cache" in self.__dict__:
            out.__dict__["_solver_cache"] = self.__dict__["_solver_cache"]
        return out

    def subset(self, subjects) -> "DesignBundle":
        """Restrict to the given subject codes (rows and Z columns)."""
        if self.z_subject is None:
            raise SpecError("centered random effects cannot be split by subject")
        keep = np.zeros(self.n_subjects, dtype=bool)
        keep[np.asarray(subjects, dtype=int)] = True
        rows = keep[self.subject]
        cols = keep[self.z_subject]
        old_to_new = -np.ones(self.n_subjects, dtype=int)
        old_to_new[keep] = np.arange(int(keep.sum()))
        return DesignBundle(
            y=self.y[rows], F=[f[rows] for f in self.F],
            F_tilde=[f[rows] for f in self.F_tilde], D=self.D, D_tilde=self.D_tilde,
            bases=self.bases, Q=self.Q, smooths=self.smooths, Z=self.Z[np.ix_(rows, cols)],
            S=self.S[np.ix_(cols, cols)], S_solve=self.S_solve[np.ix_(cols, cols)],
            subject=old_to_new[self.subject[rows]], z_subject=old_to_new[self.z_subject[cols]],
            subject_labels=self.subject_labels[keep], strata=self.strata[keep],
            x={name: v[rows] for name, v in self.x.items()})


def _column(data, name: str) -> np.ndarray:
    try:
        col = data[name]
    except (KeyError, IndexError):
        raise SpecError(f"unknown column {name!r}") from None
    return np.asarray(col)


def _is_number(v) -> bool:
    try:
        float(v)
    except (TypeError, ValueError):
        return False
    return True


def _numeric(data, name: str) -> np.ndarray:
    col = _column(data, name)
    try:
        out = col.astype(float)
    except (TypeError, ValueError):
        row = next((i + 1 for i, v in enumerate(col) if not _is_number(v)), None)
        raise SpecError(f"column {name!r} must be numeric (first bad row {row})") from None
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise SpecError(f"column {name!r} has a missing or non-finite value at row {bad[0] + 1}")
    return out


def solve_penalty(S: np.ndarray) -> np.ndarray:
    """``S`` with a small ridge added on its null space."""
    if S.size == 0:
        return S.copy()
    rot = rotate_semidefinite(np.zeros((0, S.shape[0])), S)
    if rot.q_f == 0:
        return S.copy()
    top = rot.eigenvalues[0] if rot.q_r else 1.0
    Uf = rot.U[:, rot.q_r:]
    return S + NULL_RIDGE * top * (Uf @ Uf.T)


def build_bundle(spec: ModelSpec, data) -> DesignBundle:
    """Realize the design matrices of ``spec`` on ``data``.

    ``data`` is a DataFrame or any mapping of column name to array.
    """
    if isinstance(data, Mapping):
        data = pd.DataFrame({k: np.asarray(v) for k, v in data.items()})
    y = _numeric(data, spec.response)
    n = y.shape[0]
    if n == 0:
        raise SpecError("data has no rows")
    if not spec.smooths and spec.random_effects is None:
        raise SpecError("model has no terms")
    subj_raw = _column(data, spec.subject)
    codes, labels = pd.factorize(subj_raw, sort=False)
    n_subj = len(labels)

    xs: dict = {}
    F, Ft, D, Dt, Q, bases = [], [], [], [], [], []
    for sm in spec.smooths:
        x = _numeric(data, sm.covariate)
        xs[sm.covariate] = x
        basis = sm.basis_for(x)
        bases.append(basis)
        try:
            base = design_matrix(basis, x)
        except ValueError as exc:
            raise SpecError(f"smooth on {sm.covariate!r}: {exc}") from None
        if sm.varying_multiplier is not None:
            mult = _numeric(data, sm.varying_multiplier)
            xs[sm.varying_multiplier] = mult
            base = mult[:, None] * base
        dt = diff_matrix(sm.diff_order, basis.num_basis)
        if sm.centered:
            q = centering_transform(base)
            F.append(base @ q)
            D.append(dt @ q)
            Q.append(q)
        else:
            F.append(base)
            D.append(dt)
            Q.append(None)
        Ft.append(base)
        Dt.append(dt)

    re = spec.random_effects
    if re is None:
        Z = np.zeros((n, 0))
        S = np.zeros((0, 0))
        z_subject = np.zeros(0, dtype=int)
    elif re.kind == "intercepts":
        Z = np.zeros((n, n_subj))
        Z[np.arange(n), codes] = 1.0
        S = np.eye(n_subj)
        z_subject = np.arange(n_subj)
    else:
        x = _numeric(data, re.covariate)
        xs.setdefault(re.covariate, x)
        try:
            B = design_matrix(re.basis, x)
        except ValueError as exc:
            raise SpecError(f"random curves on {re.covariate!r}: {exc}") from None
        qi = re.basis.num_basis
        Z = np.zeros((n, n_subj * qi))
        for i in range(n_subj):
            rows = codes == i
            Z[np.ix_(rows, np.arange(i * qi, (i + 1) * qi))] = B[rows]
        Si = spline_curve_penalty(re.basis)
        S = np.kron(np.eye(n_subj), Si)
        z_subject = np.repeat(np.arange(n_subj), qi)

    if spec.center_random_effects and Z.shape[1] > 1:
        qre = centering_transform(Z)
        Z = Z @ qre
        S = qre.T @ S @ qre
        z_subject = None

    strata = np.zeros(n_subj, dtype=int)
    if spec.factors:
        combos = pd.DataFrame({f: _column(data, f) for f in spec.factors})
        combo_codes = pd.MultiIndex.from_frame(combos.astype(str)).factorize()[0] \
            if len(spec.factors) > 1 else pd.factorize(combos.iloc[:, 0].astype(str))[0]
        for i in range(n_subj):
            vals = np.unique(combo_codes[codes == i])
            if vals.size != 1:
                raise SpecError(f"factor columns vary within subject {labels[i]!r}")
            strata[i] = vals[0]

    return DesignBundle(y=y, F=F, F_tilde=Ft, D=D, D_tilde=Dt, bases=bases, Q=Q, smooths=spec.smooths,
                        Z=Z, S=S, S_solve=solve_penalty(S), subject=np.asarray(codes),
                        z_subject=z_subject, subject_labels=np.asarray(labels),
                        strata=strata, x=xs)


def smooth_grid_design(bundle: DesignBundle, j: int, grid) -> np.ndarray:
    """Coefficient-function design of smooth ``j`` at ``grid`` (no multiplier)."""
    base = design_matrix(bundle.bases[j], grid)
    return base @ bundle.Q[j] if bundle.Q[j] is not None else base
