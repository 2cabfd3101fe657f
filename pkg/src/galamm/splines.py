"""Cubic regression splines and their mixed-model reparametrisation.

The basis is parametrised by the function values at the knots (natural
cubic spline, zero second derivative at the end knots), so that
``b_j(knot_k) = delta_jk``. Outside the knot range the spline continues
linearly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "MixedSmooth",
    "SmoothBasis",
    "absorb_sum_to_zero",
    "build_basis",
    "crs_design",
    "penalty",
    "place_knots",
    "to_mixed",
]

NULL_TOL = 1e-9


@dataclass(frozen=True)
class SmoothBasis:
    knots: np.ndarray
    K: int
    constrained: bool
    design: np.ndarray
    S: np.ndarray
    # maps coefficients of this basis to knot-value coefficients (K_raw x K)
    constraint_map: np.ndarray = field(default=None, repr=False)

    def evaluate(self, x):
        """Design matrix of this basis at new covariate values."""
        X = crs_design(np.asarray(x, dtype=float), self.knots)
        return X if self.constraint_map is None else X @ self.constraint_map


@dataclass(frozen=True)
class MixedSmooth:
    basis: SmoothBasis
    X_F: np.ndarray
    X_R: np.ndarray
    U_F: np.ndarray
    U_R: np.ndarray
    d_plus: np.ndarray
    r: int

    @property
    def null_dim(self):
        return self.X_F.shape[1]

    @property
    def to_basis_F(self):
        """Map from fixed coefficients to basis coefficients."""
        return self.U_F

    @property
    def to_basis_R(self):
        """Map from penalised coefficients to basis coefficients."""
        return self.U_R / np.sqrt(self.d_plus)

    def coefficients(self, beta_F, zeta):
        """Basis-parametrisation coefficients from the mixed-form ones."""
        return self.to_basis_F @ np.asarray(beta_F, dtype=float) + self.to_basis_R @ np.asarray(zeta, dtype=float)

    def transform(self):
        """Matrix ``M`` with ``beta = M @ [beta_F; zeta]``."""
        return np.hstack([self.to_basis_F, self.to_basis_R])

    def design_at(self, x):
        """Fixed and penalised design blocks at new covariate values."""
        X = self.basis.evaluate(x)
        return X @ self.to_basis_F, X @ self.to_basis_R


def place_knots(x, K):
    ux = np.unique(np.asarray(x, dtype=float))
    if K < 3:
        raise ValueError("basis size K must be at least 3")
    if ux.size < K:
        raise ValueError(f"need at least K={K} distinct covariate values, got {ux.size}")
    knots = np.quantile(ux, np.linspace(0.0, 1.0, K))
    knots[0], knots[-1] = ux[0], ux[-1]
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots are not strictly increasing")
    return knots


def _second_derivative_map(knots):
    """Return (D, B_banded, F) where F maps knot values to knot second derivatives."""
    K = knots.size
    h = np.diff(knots)
    D = np.zeros((K - 2, K))
    idx = np.arange(K - 2)
    D[idx, idx] = 1.0 / h[:-1]
    D[idx, idx + 1] = -1.0 / h[:-1] - 1.0 / h[1:]
    D[idx, idx + 2] = 1.0 / h[1:]
    ab = np.zeros((3, K - 2))
    ab[1] = (h[:-1] + h[1:]) / 3.0
    ab[0, 1:] = h[1:-1] / 6.0
    ab[2, :-1] = h[1:-1] / 6.0
    Fm = solve_banded((1, 1), ab, D)
    F = np.zeros((K, K))
    F[1:-1] = Fm
    return D, ab, F


def crs_design(x, knots):
    """Evaluate the value-parametrised cubic regression spline basis."""
    x = np.asarray(x, dtype=float)
    K = knots.size
    h = np.diff(knots)
    _, _, F = _second_derivative_map(knots)
    X = np.zeros((x.size, K))

    inside = (x >= knots[0]) & (x <= knots[-1])
    xi = x[inside]
    j = np.clip(np.searchsorted(knots, xi, side="right") - 1, 0, K - 2)
    hj = h[j]
    am = (knots[j + 1] - xi) / hj
    ap = (xi - knots[j]) / hj
    cm = ((knots[j + 1] - xi) ** 3 / hj - hj * (knots[j + 1] - xi)) / 6.0
    cp = ((xi - knots[j]) ** 3 / hj - hj * (xi - knots[j])) / 6.0
    rows = np.flatnonzero(inside)
    Xi = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
    Xi[np.arange(rows.size), j] += am
    Xi[np.arange(rows.size), j + 1] += ap
    X[rows] = Xi

    lo = x < knots[0]
    if np.any(lo):
        # f'(x_1) = (b_2 - b_1)/h_1 - h_1 * delta_2 / 6
        slope = -h[0] / 6.0 * F[1]
        slope[0] -= 1.0 / h[0]
        slope[1] += 1.0 / h[0]
        row = np.zeros(K)
        row[0] = 1.0
        X[lo] = row + (x[lo] - knots[0])[:, None] * slope
    hi = x > knots[-1]
    if np.any(hi):
        # f'(x_K) = (b_K - b_{K-1})/h + h * delta_{K-1} / 6
        slope = h[-1] / 6.0 * F[K - 2]
        slope[K - 2] -= 1.0 / h[-1]
        slope[K - 1] += 1.0 / h[-1]
        row = np.zeros(K)
        row[-1] = 1.0
        X[hi] = row + (x[hi] - knots[-1])[:, None] * slope
    return X


def build_basis(x, K):
    """Unconstrained cubic regression spline basis with quantile knots."""
    x = np.asarray(x, dtype=float)
    knots = place_knots(x, K)
    X = crs_design(x, knots)
    D, ab, _ = _second_derivative_map(knots)
    S = D.T @ solve_banded((1, 1), ab, D)
    S = 0.5 * (S + S.T)
    return SmoothBasis(knots=knots, K=K, constrained=False, design=X, S=S, constraint_map=None)


def penalty(basis):
    """Second-derivative penalty ``S`` with ``beta' S beta = int f''^2``."""
    return basis.S


def absorb_sum_to_zero(basis):
    """Reparametrise so every design column sums to zero over the sample."""
    if basis.constrained:
        raise ValueError("basis already carries a sum-to-zero constraint")
    C = basis.design.sum(axis=0)[:, None]
    Qm, _ = np.linalg.qr(C, mode="complete")
    Zc = Qm[:, 1:]
    X = basis.design @ Zc
    S = Zc.T @ basis.S @ Zc
    return replace(basis, K=basis.K - 1, constrained=True, design=X, S=0.5 * (S + S.T), constraint_map=Zc)


def _fix_signs(U):
    # deterministic eigenvector orientation: largest-magnitude entry positive
    k = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[k, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def to_mixed(basis):
    """Split into unpenalised and penalised parts via ``S = U D U'``."""
    evals, U = np.linalg.eigh(basis.S)
    order = np.argsort(evals)[::-1]
    evals, U = evals[order], _fix_signs(U[:, order])
    r = int(np.sum(evals > NULL_TOL * evals[0]))
    U_R, U_F = U[:, :r], U[:, r:]
    d_plus = evals[:r].copy()
    X = basis.design
    X_F = X @ U_F
    X_R = (X @ U_R) / np.sqrt(d_plus)
    return MixedSmooth(basis=basis, X_F=X_F, X_R=X_R, U_F=U_F, U_R=U_R, d_plus=d_plus, r=r)
