"""Least-squares conditional expectations on a polynomial basis."""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .errors import BasisError

RANK_TOL = 1e-10
CONSTANT_TOL = 1e-12


def monomial_exponents(dim, degree):
    """Exponent tuples of all monomials of total degree ``<= degree`` (constant first)."""
    out = [tuple([0] * dim)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(dim), deg):
            e = [0] * dim
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


def polynomial_design(b, degree=3, weights=None):
    """Design matrix of standardized monomials in ``b`` (P, d).

    Coordinates with (numerically) no spread are dropped, so a deterministic
    regressor collapses the basis to the constant column.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    P = b.shape[0]
    mask = np.ones(P, dtype=bool) if weights is None else np.asarray(weights, dtype=bool)
    sub = b[mask]
    if sub.shape[0] == 0:
        return np.ones((P, 1))
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    live = std > CONSTANT_TOL * np.maximum(1.0, np.abs(mean))
    cols = [np.ones(P)]
    if np.any(live):
        s = (b[:, live] - mean[live]) / std[live]
        for e in monomial_exponents(int(live.sum()), degree)[1:]:
            cols.append(np.prod(s ** np.asarray(e), axis=1))
    return np.stack(cols, axis=1)


class Regression:
    """Orthogonal projector onto the span of a design restricted to ``mask`` rows.

    Rows outside the mask receive the fitted function evaluated at their own
    regressors but do not influence the fit.
    """

    def __init__(self, design, mask=None):
        design = np.asarray(design, dtype=float)
        self.P = design.shape[0]
        self.mask = np.ones(self.P, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        A = design[self.mask]
        n_fit = A.shape[0]
        if n_fit < design.shape[1]:
            raise BasisError(f"{n_fit} samples for {design.shape[1]} basis functions")
        q, r = np.linalg.qr(A)
        diag = np.abs(np.diag(r))
        if diag.size and diag.min() <= RANK_TOL * diag.max():
            raise BasisError("regression design matrix is rank deficient")
        self.design = design
        self._q = q
        self._r = r
        self.n_fit = n_fit
        self.n_basis = design.shape[1]

    def coefficients(self, values):
        v = np.asarray(values, dtype=float)
        flat_v = v.reshape(v.shape[0], -1)[self.mask]
        return np.linalg.solve(self._r, self._q.T @ flat_v)

    def fit(self, values):
        """Fitted conditional expectation at every row, same shape as ``values``."""
        v = np.asarray(values, dtype=float)
        coef = self.coefficients(v)
        return (self.design @ coef).reshape(v.shape)

    def fit_with_error(self, values):
        """Fitted values and pointwise standard errors (homoscedastic residual variance)."""
        v = np.asarray(values, dtype=float)
        fitted = self.fit(v)
        flat_v = v.reshape(v.shape[0], -1)
        resid = (flat_v - fitted.reshape(flat_v.shape))[self.mask]
        dof = max(self.n_fit - self.n_basis, 1)
        sigma2 = np.sum(resid ** 2, axis=0) / dof
        # leverage of each row: |R^-T a_p|^2
        lev_vec = np.linalg.solve(self._r.T, self.design.T)
        lev = np.sum(lev_vec ** 2, axis=0)
        se = np.sqrt(lev[:, None] * sigma2[None, :])
        return fitted, se.reshape(v.shape)

    def fit_with_robust_error(self, values):
        """Fitted values and heteroscedasticity-robust (sandwich) standard errors.

        ``values`` must be one-dimensional.
        """
        v = np.asarray(values, dtype=float)
        fitted = self.fit(v)
        resid = (v - fitted)[self.mask]
        qr = self._q * resid[:, None]
        meat = qr.T @ qr
        lev_vec = np.linalg.solve(self._r.T, self.design.T)
        var = np.einsum("kp,kl,lp->p", lev_vec, meat, lev_vec)
        return fitted, np.sqrt(np.maximum(var, 0.0))


def conditional_expectation(b, values, degree=3, mask=None):
    """One-shot ``E[values | b]`` on the polynomial basis."""
    return Regression(polynomial_design(b, degree, mask), mask).fit(values)
