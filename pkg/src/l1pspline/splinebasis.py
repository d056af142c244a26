"""B-spline bases, difference penalties and centering transforms.

Knots are equally spaced. For an order ``M`` basis with ``p`` functions on
``[x_min, x_max]`` there are ``c = p - M`` interior knots and ``M`` boundary
knots on each side, placed by continuing the interior spacing outward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True, eq=False)
class BasisSpec:
    order: int
    num_basis: int
    domain: tuple[float, float]
    knots: np.ndarray

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def num_interior(self) -> int:
        return self.num_basis - self.order

    @property
    def spacing(self) -> float:
        return float(self.knots[1] - self.knots[0])

    def __repr__(self) -> str:
        return (f"BasisSpec(order={self.order}, num_basis={self.num_basis}, "
                f"domain={self.domain})")


def make_basis(order: int, num_basis: int, domain) -> BasisSpec:
    order, num_basis = int(order), int(num_basis)
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if num_basis < order:
        raise ValueError(f"num_basis ({num_basis}) must be >= order ({order})")
    lo, hi = (float(v) for v in domain)
    if not (np.isfinite(lo) and np.isfinite(hi)) or not hi > lo:
        raise ValueError(f"domain must be a nondegenerate interval, got {domain}")
    c = num_basis - order
    delta = (hi - lo) / (c + 1)
    # index 0 is t_M = x_min, index c+1 is t_{M+c+1} = x_max
    steps = np.arange(-(order - 1), c + order + 1)
    knots = lo + delta * steps
    knots[order - 1] = lo
    knots[order + c] = hi
    knots.setflags(write=False)
    return BasisSpec(order, num_basis, (lo, hi), knots)


def eval_basis(knots: np.ndarray, order: int, x, right_end: float | None = None) -> np.ndarray:
    """Cox-de Boor evaluation of all order-``order`` B-splines on ``knots``.

    Returns an ``(len(x), len(knots) - order)`` array. Intervals are half-open
    ``[t_j, t_{j+1})``; if ``right_end`` is given, a point equal to it is put
    in the last interval ending at ``right_end`` so that the basis still sums
    to one there.
    """
    t = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nk = len(t)
    B = ((t[None, :-1] <= x[:, None]) & (x[:, None] < t[None, 1:])).astype(float)
    if right_end is not None:
        at_end = x == right_end
        if np.any(at_end):
            last = int(np.searchsorted(t, right_end, side="left")) - 1
            B[at_end, :] = 0.0
            B[at_end, last] = 1.0
    for m in range(2, order + 1):
        nb = nk - m
        left_den = t[m - 1:m - 1 + nb] - t[:nb]
        right_den = t[m:m + nb] - t[1:1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - t[None, :nb]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[None, m:m + nb] - x[:, None]) / right_den, 0.0)
        B = left * B[:, :nb] + right * B[:, 1:nb + 1]
    return B


def eval_basis_derivative(knots: np.ndarray, order: int, x, deriv: int,
                          right_end: float | None = None) -> np.ndarray:
    """``deriv``-th derivative of every order-``order`` B-spline at ``x``."""
    if deriv == 0:
        return eval_basis(knots, order, x, right_end)
    if deriv >= order:
        nb = len(knots) - order
        return np.zeros((np.atleast_1d(x).size, nb))
    t = np.asarray(knots, dtype=float)
    lower = eval_basis_derivative(t, order - 1, x, deriv - 1, right_end)
    nb = len(t) - order
    m = order
    left_den = t[m - 1:m - 1 + nb] - t[:nb]
    right_den = t[m:m + nb] - t[1:1 + nb]
    with np.errstate(divide="ignore"):
        a = np.where(left_den > 0, (m - 1) / left_den, 0.0)
        b = np.where(right_den > 0, (m - 1) / right_den, 0.0)
    return a * lower[:, :nb] - b * lower[:, 1:nb + 1]


def design_matrix(basis: BasisSpec, xs) -> np.ndarray:
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    lo, hi = basis.domain
    bad = np.flatnonzero(~((xs >= lo) & (xs <= hi)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"x[{i}] = {xs[i]!r} lies outside the basis domain [{lo}, {hi}]"
                         f" ({bad.size} offending values)")
    return eval_basis(basis.knots, basis.order, xs, right_end=hi)


def _int_diff(diff_order: int, p: int) -> np.ndarray:
    return np.diff(np.eye(p, dtype=np.int64), n=diff_order, axis=0)


def diff_matrix(diff_order: int, p: int) -> np.ndarray:
    """Finite difference matrix of order ``diff_order`` with ``p`` columns."""
    if diff_order < 1:
        raise ValueError("diff_order must be >= 1")
    if diff_order >= p:
        raise ValueError(f"diff_order ({diff_order}) must be < p ({p})")
    return _int_diff(diff_order, p).astype(float)


def augmented_diff(k: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Square augmented difference matrix and its exact inverse.

    The first ``k + 1`` rows are the leading rows of the difference matrices of
    order ``0..k`` and the rest is the order ``k + 1`` difference matrix. The
    inverse is a product of block lower-triangular matrices of ones.
    """
    if k < 0 or k > p - 2:
        raise ValueError(f"need 0 <= k <= p - 2, got k={k}, p={p}")
    rows = [np.eye(p, dtype=np.int64)[0]]
    for i in range(1, k + 1):
        rows.append(_int_diff(i, p)[0])
    dstar = np.vstack(rows + [_int_diff(k + 1, p)])
    minv = np.eye(p, dtype=np.int64)
    for i in range(k + 1):
        block = np.eye(p, dtype=np.int64)
        block[i:, i:] = np.tril(np.ones((p - i, p - i), dtype=np.int64))
        minv = minv @ block
    if not np.array_equal(dstar @ minv, np.eye(p, dtype=np.int64)):
        raise ArithmeticError("augmented difference inverse failed")  # pragma: no cover
    return dstar.astype(float), minv.astype(float)


def centering_transform(F: np.ndarray) -> np.ndarray:
    """Orthonormal ``Q`` (p x p-1) with ``1' F Q = 0``."""
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[1] < 2:
        raise ValueError("F needs at least two columns to be centered")
    colsums = F.sum(axis=0)
    if not np.any(colsums):
        raise ValueError("all column sums of F are zero; nothing to center against")
    Qfull, _ = scipy.linalg.qr(colsums[:, None], mode="full")
    return Qfull[:, 1:]


def _gauss_legendre_integral(knots, lo, hi, fn, npts):
    """Integrate ``fn(x) -> (n, k)`` over [lo, hi] interval by knot interval."""
    nodes, weights = np.polynomial.legendre.leggauss(npts)
    brk = np.unique(np.concatenate([[lo, hi], knots[(knots > lo) & (knots < hi)]]))
    total = 0.0
    for a, b in zip(brk[:-1], brk[1:]):
        xq = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        total = total + 0.5 * (b - a) * np.einsum("i,i...->...", weights, fn(xq))
    return total


def tv_bound_constant(basis: BasisSpec, k: int) -> float:
    """Constant C with  int |f^(k+1)| <= C * ||D^(k+1) beta||_1  on the domain."""
    M = basis.order
    if k < 0 or k >= M - 1:
        raise ValueError(f"need 0 <= k < order - 1 = {M - 1}, got k={k}")
    t = basis.knots
    lo, hi = basis.domain
    m = M - k - 1
    npts = math.ceil((M - k) / 2) + 1
    integrals = _gauss_legendre_integral(
        t, lo, hi, lambda xq: eval_basis(t, m, xq, right_end=hi), npts)
    # phi_j^{m} for j = k+2..p (1-based) -> columns k+1..p-1
    a = float(np.max(integrals[k + 1:basis.num_basis]))
    h = 1.0
    for order_i in range(M - 1, M - k - 2, -1):
        h *= order_i / (t[order_i] - t[0])
    return a * h


def spline_curve_penalty(basis: BasisSpec) -> np.ndarray:
    """Gram matrix of basis second derivatives over the domain."""
    if basis.order < 3:
        raise ValueError("second-derivative penalty needs order >= 3")
    t = basis.knots
    lo, hi = basis.domain

    def outer(xq):
        d2 = eval_basis_derivative(t, basis.order, xq, 2, right_end=hi)
        return d2[:, :, None] * d2[:, None, :]

    S = _gauss_legendre_integral(t, lo, hi, outer, basis.order)
    return 0.5 * (S + S.T)
