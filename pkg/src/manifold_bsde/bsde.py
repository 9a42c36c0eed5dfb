"""Backward regression Monte-Carlo solver for the coordinate BSDE with connection drift.

The equation solved on a chart is

    dX = Z dW + (-1/2 Gamma_jk(X) ([Z]^k | [Z]^j) + f(B, X, Z)) dt,   X_T = F(B_T),

where ``[Z]^k`` is the k-th row of the ``n x d_w`` frame ``Z``.  One backward
sweep computes, for ``i = N-1, ..., 0``,

    Z_i = E[(X_{i+1} - E[X_{i+1} | B_i]) dW_i^T | B_i] / dt
    X_i = E[X_{i+1} | B_i] - drift(B_i, X_i, Zbar_i) dt      (fixed point in X_i)

with conditional expectations from polynomial regression on ``B_i``.  The
frame ``Zbar`` entering the drift is the one from the previous Picard pass,
so the outer loop is a Picard iteration on the map ``Zbar -> Z``.
"""

from __future__ import annotations

import warnings
from math import comb
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import forward_sde as fsde
from . import geometry as geo
from .errors import ConvergenceError, DomainError
from .regression import Regression, polynomial_design
from .report import EstimateReport, margin_report

PICARD_MAX = 30
PICARD_TOL = 1e-6
FIXED_POINT_MAX = 20
FIXED_POINT_TOL = 1e-10
BASIS_DEGREE = 3
ESCAPE_WARN_FRACTION = 0.05
SAMPLES_PER_BASIS = 10


# --- drift -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Drift ``f(b, x, z)`` with its declared Lipschitz and growth constants.

    ``f`` is vectorised: ``b`` (P, d), ``x`` (P, n), ``z`` (P, n, d_w) -> (P, n).
    """

    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz_L: float = 0.0
    bound_L2: float = 0.0
    anchor_x0: np.ndarray | None = None
    name: str = "custom"
    depends_on_z: bool = True

    def __call__(self, b, x, z):
        return np.asarray(self.f(b, x, z), dtype=float)


def zero_drift():
    return DriftSpec(lambda b, x, z: np.zeros_like(x), 0.0, 0.0, name="zero", depends_on_z=False)


def constant_drift(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return DriftSpec(lambda b, x, z: np.broadcast_to(c, x.shape).copy(), 0.0,
                     float(np.linalg.norm(c)), name="constant", depends_on_z=False)


def linear_drift(A=None, offset=None, dim=1):
    """Flat-chart drift ``f = A x + offset`` (identity ``A`` by default)."""
    A = np.eye(dim) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    offset = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    lip = float(np.linalg.norm(A, 2))

    def f(b, x, z):
        return x @ A.T + offset

    return DriftSpec(f, lip, float(np.linalg.norm(offset)), np.zeros(A.shape[0]), name="linear",
                     depends_on_z=False)


def radial_drift(m, center, strength=1.0):
    """Unit field pointing away from ``center`` scaled by ``strength`` (inward if negative)."""
    center = np.asarray(center, dtype=float)

    def f(b, x, z):
        v = -geo.geodesic_connect(m, x, np.broadcast_to(center, x.shape))
        nv = geo.riemannian_norm(m, x, v)
        safe = np.where(nv > 0, nv, 1.0)
        return strength * np.where(nv[..., None] > 0, v / safe[..., None], 0.0)

    return DriftSpec(f, float("nan"), abs(strength), center, name="radial", depends_on_z=False)


def md_drift(m: geo.ChartManifold, d: DriftSpec, b, x, z) -> np.ndarray:
    """``-1/2 sum_jk Gamma_jk(x) ([z]^k | [z]^j) + f(b, x, z)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    out = d(b, x, z)
    if m.kind != "flat":
        gam = geo.christoffel_at(m, x)
        out = out - 0.5 * np.einsum("...ijk,...jw,...kw->...i", gam, z, z)
    return out


# --- terminal values and domains ---------------------------------------------

@dataclass(frozen=True, eq=False)
class TerminalCondition:
    """Terminal map ``U = F(B_T)``; ``F`` maps (P, d) -> (P, n)."""

    F: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, b):
        return np.asarray(self.F(b), dtype=float)


def constant_terminal(p):
    p = np.asarray(p, dtype=float)
    return TerminalCondition(lambda b: np.broadcast_to(p, b.shape[:-1] + p.shape).copy(), "constant")


def linear_terminal(A=None, offset=None, dim=1):
    """``F(b) = A b + offset``; identity when ``A`` is omitted."""
    A = np.eye(dim) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    offset = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    return TerminalCondition(lambda b: b @ A.T + offset, "linear")


def orthonormal_frame(m, x):
    """Chart components of an orthonormal basis at ``x`` (columns), diagonal metrics only."""
    g = geo.metric_at(m, x)
    return np.diag(1.0 / np.sqrt(np.diag(g)))


def ball_terminal(m, center, radius, scale=1.0):
    """Smooth nonconstant map of ``b`` into the open geodesic ball ``B(center, radius)``.

    ``F(b) = exp_o(radius * tanh(scale |b|) b / |b|)`` using the first ``n``
    components of ``b`` in an orthonormal frame at ``o``.
    """
    center = np.asarray(center, dtype=float)
    E = orthonormal_frame(m, center)
    n = m.dim

    def F(b):
        b = np.asarray(b, dtype=float)
        c = np.zeros(b.shape[:-1] + (n,))
        k = min(n, b.shape[-1])
        c[..., :k] = b[..., :k]
        nb = np.linalg.norm(c, axis=-1, keepdims=True)
        safe = np.where(nb > 0, nb, 1.0)
        unit = np.where(nb > 0, c / safe, 0.0)
        v = radius * np.tanh(scale * nb) * unit
        return geo.exp_map(m, np.broadcast_to(center, v.shape), v @ E.T)

    return TerminalCondition(F, "ball")


@dataclass(frozen=True, eq=False)
class DomainGauge:
    """Sublevel set ``{chi <= level}``; geodesic balls use ``chi = d(o, .)^2``."""

    manifold: geo.ChartManifold
    chi: Callable[[np.ndarray], np.ndarray]
    level: float
    center: np.ndarray
    radius: float | None = None

    def contains(self, x, band=0.0):
        x = np.asarray(x, dtype=float)
        m = self.manifold
        in_chart = m.contains(x)
        xc = np.clip(x, m.lower, m.upper)
        return in_chart & (np.asarray(self.chi(xc)) <= self.level + band)

    def gradient(self, x, step=1e-6):
        """Coordinate differential of ``chi`` (a covector)."""
        x = np.asarray(x, dtype=float)
        if self.radius is not None:
            m = self.manifold
            v = geo.geodesic_connect(m, x, np.broadcast_to(self.center, x.shape))
            return -2.0 * np.einsum("...ij,...j->...i", geo.metric_at(m, x), v)
        out = np.empty_like(x)
        for k in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[k] = step
            out[..., k] = (self.chi(x + e) - self.chi(x - e)) / (2 * step)
        return out

    def boundary_points(self, count, rng):
        if self.radius is None:
            raise DomainError("boundary sampling needs a geodesic ball gauge")
        m = self.manifold
        c = np.broadcast_to(self.center, (count, m.dim))
        u = geo.random_unit_vectors(m, c, rng)
        return geo.exp_map(m, c, self.radius * u)

    def interior_points(self, count, rng):
        if self.radius is None:
            raise DomainError("interior sampling needs a geodesic ball gauge")
        return geo.sample_ball(self.manifold, self.center, self.radius, count, rng)

    def project(self, x):
        """Pull points outside the sublevel set back along the geodesic from the center.

        Returns the projected array and a boolean mask of moved points.
        """
        x = np.asarray(x, dtype=float)
        m = self.manifold
        out_mask = ~np.asarray(self.contains(x), dtype=bool)
        if not np.any(out_mask):
            return x, out_mask
        y = x.copy()
        bad = x[out_mask]
        o = np.broadcast_to(self.center, bad.shape)
        if m.kind != "flat":
            # points that left the chart are first clipped into it
            bad = np.clip(bad, m.lower, m.upper)
        v = geo.geodesic_connect(m, o, bad)
        if self.radius is not None:
            dist = geo.riemannian_norm(m, o, v)
            y[out_mask] = geo.exp_map(m, o, (self.radius / dist)[:, None] * v)
        else:
            lo = np.zeros(len(bad))
            hi = np.ones(len(bad))
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                ok = self.contains(geo.exp_map(m, o, mid[:, None] * v))
                lo = np.where(ok, mid, lo)
                hi = np.where(ok, hi, mid)
            y[out_mask] = geo.exp_map(m, o, lo[:, None] * v)
        return y, out_mask


def geodesic_ball(m, center, radius):
    center = np.asarray(center, dtype=float)
    if not np.all(m.contains(center)):
        raise DomainError("ball center outside chart")

    def chi(x):
        return geo.distance(m, np.broadcast_to(center, np.shape(x)), x) ** 2

    return DomainGauge(m, chi, float(radius) ** 2, center, float(radius))


# --- solver --------------------------------------------------------------------

@dataclass
class BsdeSolution:
    """Discrete solution on the grid; ``X`` (P, N+1, n), ``Z`` (P, N, n, d_w)."""

    grid: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    B: fsde.PathEnsemble
    W: fsde.PathEnsemble
    picard_residuals: list = field(default_factory=list)
    X_forward: np.ndarray | None = None
    x0: np.ndarray | None = None
    x0_std_error: np.ndarray | None = None
    projection_fraction: float = 0.0
    forward_residual: float = 0.0
    stop_index: np.ndarray | None = None
    manifold: geo.ChartManifold | None = None
    drift: DriftSpec | None = None
    warnings: list = field(default_factory=list)

    @property
    def dW(self):
        return self.W.increments

    def metadata(self):
        return {
            "picard_residuals": list(map(float, self.picard_residuals)),
            "picard_iterations": len(self.picard_residuals),
            "projection_fraction": float(self.projection_fraction),
            "forward_residual": float(self.forward_residual),
            "x0": None if self.x0 is None else self.x0.tolist(),
            "x0_std_error": None if self.x0_std_error is None else self.x0_std_error.tolist(),
            "warnings": list(self.warnings),
        }


def _project(domain, x):
    if domain is None:
        return x, np.zeros(x.shape[0], dtype=bool)
    return domain.project(x)


def _step_regression(b, degree, live):
    """Regression on the alive rows, lowering the degree when samples are scarce."""
    n_live = int(live.sum())
    dim = b.shape[-1]
    deg = degree
    while deg > 0 and n_live < SAMPLES_PER_BASIS * comb(dim + deg, deg):
        deg -= 1
    return Regression(polynomial_design(b, deg, live), live)


def _backward_sweep(m, d, B, dW, dt, U, z_bar, degree, domain, alive):
    P, N1, _ = B.shape
    N = N1 - 1
    n = U.shape[-1]
    dw = dW.shape[-1]
    X = np.empty((P, N1, n))
    Z = np.zeros((P, N, n, dw))
    X[:, N] = U
    projected = 0
    for i in range(N - 1, -1, -1):
        live = alive[:, i]
        X[:, i] = X[:, i + 1]
        if not np.any(live):
            continue
        nxt = X[:, i + 1]
        if np.all(nxt[live] == nxt[live][0]):
            # constant continuation: exact, with no regression roundoff
            ey = np.broadcast_to(nxt[live][0], nxt.shape).copy()
            zi = np.zeros((P, n, dw))
        else:
            reg = _step_regression(B[:, i], degree, live)
            ey = reg.fit(nxt)
            resid = nxt - ey
            zi = reg.fit(resid[:, :, None] * dW[:, i, None, :]) / dt[i]
            zi[~live] = 0.0
        Z[:, i] = zi
        xl = ey[live]
        bl = B[live, i]
        zb = z_bar[live, i]
        for _ in range(FIXED_POINT_MAX):
            new = ey[live] - md_drift(m, d, bl, xl, zb) * dt[i]
            new, moved = _project(domain, new)
            change = np.max(np.abs(new - xl)) if new.size else 0.0
            xl = new
            if change < FIXED_POINT_TOL:
                break
        projected += int(moved.sum())
        X[live, i] = xl
    return X, Z, projected


def _forward_pass(m, d, B, dW, dt, x0, Z, domain, alive):
    P, N1, _ = B.shape
    Xf = np.empty((P, N1, x0.shape[-1]))
    Xf[:, 0] = x0
    moved = 0
    for i in range(N1 - 1):
        live = alive[:, i]
        cur = Xf[:, i]
        step = np.einsum("pnw,pw->pn", Z[:, i], dW[:, i]) + md_drift(m, d, B[:, i], cur, Z[:, i]) * dt[i]
        nxt = np.where(live[:, None], cur + step, cur)
        nxt, mask = _project(domain, nxt)
        moved += int(mask.sum())
        Xf[:, i + 1] = nxt
    return Xf, moved


def _path_gap(m, X1, X2):
    if m.kind == "flat":
        d2 = np.sum((X1 - X2) ** 2, axis=-1)
    else:
        d2 = geo.distance(m, X1, X2) ** 2
    return float(np.sqrt(np.mean(np.max(d2, axis=1))))


def solve_on_paths(m, d: DriftSpec, B: fsde.PathEnsemble, W: fsde.PathEnsemble, U,
                   picard_max=PICARD_MAX, tol=PICARD_TOL, degree=BASIS_DEGREE,
                   domain: DomainGauge | None = None, z_init="zero", init_seed=0,
                   stop_index=None) -> BsdeSolution:
    """Backward solver on given driving paths and terminal values ``U`` (P, n).

    ``stop_index`` freezes each path after its stopping index: ``X`` and
    ``Z`` are constant (``Z = 0``) from there on and frozen paths are left out
    of the regressions.
    """
    grid = fsde.check_grid(B.grid)
    dt = np.diff(grid)
    Bp = B.paths
    dW = W.increments
    P, N1, _ = Bp.shape
    N = N1 - 1
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] != P:
        raise DomainError("terminal values must have one row per path")
    n = U.shape[-1]
    if m.kind != "flat" and n != m.dim:
        raise DomainError("terminal values have the wrong chart dimension")
    geo._check_domain(m, U, "terminal value")
    if domain is not None and not np.all(domain.contains(U, band=1e-9)):
        raise DomainError("terminal values leave the domain sublevel set")
    if stop_index is None:
        stop = np.full(P, N, dtype=np.int64)
    else:
        stop = np.asarray(stop_index, dtype=np.int64)
    alive = np.arange(N)[None, :] < stop[:, None]

    dw = dW.shape[-1]
    if z_init == "zero":
        z_bar = np.zeros((P, N, n, dw))
    elif z_init == "random":
        rng = np.random.default_rng(init_seed)
        z_bar = rng.standard_normal((P, N, n, dw)) * alive[:, :, None, None]
    else:
        z_bar = np.asarray(z_init, dtype=float)

    residuals = []
    X_prev = None
    converged = False
    for _ in range(picard_max):
        X, Z, projected = _backward_sweep(m, d, Bp, dW, dt, U, z_bar, degree, domain, alive)
        if X_prev is not None:
            residuals.append(_path_gap(m, X, X_prev))
            if residuals[-1] < tol:
                converged = True
                break
        elif not d.depends_on_z and m.kind == "flat":
            # the frame never enters the drift: one sweep is exact
            residuals.append(0.0)
            converged = True
            break
        X_prev = X
        z_bar = Z
    if not converged:
        raise ConvergenceError(f"Picard iteration did not reach tol={tol}", residuals)

    drift_path = np.zeros((P, N, n))
    for i in range(N):
        live = alive[:, i]
        if np.any(live):
            drift_path[live, i] = md_drift(m, d, Bp[live, i], X[live, i], Z[live, i]) * dt[i]
    integrand = U - drift_path.sum(axis=1)
    x0 = X[0, 0].copy() if P else np.zeros(n)
    x0_se = integrand.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(n)

    Xf, moved = _forward_pass(m, d, Bp, dW, dt, X[:, 0], Z, domain, alive)
    fres = float(np.sqrt(np.mean(np.sum((Xf[:, N] - X[:, N]) ** 2, axis=-1))))
    n_states = int(alive.sum())
    frac = projected / max(n_states, 1)
    sol = BsdeSolution(grid, X, Z, B, W, residuals, Xf, x0, x0_se, frac, fres,
                       stop, m, d)
    if frac > ESCAPE_WARN_FRACTION:
        msg = f"domain projection applied to {frac:.1%} of states"
        sol.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if moved:
        sol.warnings.append(f"forward re-simulation projected {moved} states")
    return sol


def solve_bsde(m, d: DriftSpec, tc: TerminalCondition, spec: fsde.DiffusionSpec, grid, P, seed,
               picard_max=PICARD_MAX, tol=PICARD_TOL, degree=BASIS_DEGREE,
               domain: DomainGauge | None = None, z_init="zero", init_seed=0,
               workers=None) -> BsdeSolution:
    """Simulate the driving diffusion and solve the BSDE with ``X_T = F(B_T)``."""
    B, W = fsde.simulate_diffusion(spec, grid, P, seed, workers)
    U = tc(B.paths[:, -1])
    return solve_on_paths(m, d, B, W, U, picard_max, tol, degree, domain, z_init, init_seed)


# --- structural checks on f ----------------------------------------------------

def _random_frames(rng, shape, n, dw, scale=1.0):
    return scale * rng.standard_normal(shape + (n, dw))


def check_pointing_outward(d: DriftSpec, dg: DomainGauge, m, samples=1000, strict=False,
                           dim_b=1, dim_w=1, rng=None, tol=1e-9) -> EstimateReport:
    """Infimum of ``(D chi(x) | f(b, x, z))`` over sampled boundary points.

    The weak condition holds when the infimum is ``>= -tol``; the strict one
    when it is positive, in which case it is reported as ``zeta``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = dg.boundary_points(samples, rng)
    b = rng.standard_normal((samples, dim_b))
    z = _random_frames(rng, (samples,), m.dim, dim_w)
    val = np.einsum("pi,pi->p", dg.gradient(x), d(b, x, z))
    inf = float(np.min(val))
    weak = inf >= -tol
    strong = inf > tol
    rep = margin_report("pointing_outward", val if not strict else val - tol,
                        tolerance=tol, sample_fields={"x": x, "b": b},
                        params={"strict": strict, "samples": samples})
    rep.fitted_constants = {"zeta": inf if strong else 0.0}
    rep.details = {"inf": inf, "weak": bool(weak), "strict": bool(strong)}
    rep.passed = bool(strong if strict else weak)
    return rep


def drift_spec_audit(d: DriftSpec, m, samples=1000, dim_b=1, dim_w=1, region=None,
                     rng=None) -> EstimateReport:
    """Empirical Lipschitz ratio of ``f`` and bound of ``f(b, x0, 0)`` versus the declared ones.

    ``region`` is a :class:`DomainGauge` to sample points from; flat charts
    default to the unit ball around the origin.  A quarter of the samples
    vary only ``x`` (``b = b'``, ``z = z' = 0``) so that pure ``x``
    Lipschitz ratios are attained.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = m.dim
    if region is None:
        center = np.zeros(n) if m.kind == "flat" else 0.5 * (m.lower + m.upper)
        radius = 1.0 if m.kind == "flat" else 0.5
        region = geodesic_ball(m, center, radius)
    x = region.interior_points(samples, rng)
    y = region.interior_points(samples, rng)
    b = rng.standard_normal((samples, dim_b))
    b2 = rng.standard_normal((samples, dim_b))
    z = _random_frames(rng, (samples,), n, dim_w)
    z2 = _random_frames(rng, (samples,), n, dim_w)
    pure = np.arange(samples) < samples // 4
    b2[pure] = b[pure]
    z[pure] = 0.0
    z2[pure] = 0.0
    fx = d(b, x, z)
    fy = d(b2, y, z2)
    if m.kind == "flat":
        pf, pz = fx, z
    else:
        pf = geo.parallel_transport(m, x, y, fx)
        pz = geo.parallel_transport(m, x, y, z)
    num = geo.riemannian_norm(m, y, pf - fy)
    dist = geo.distance(m, x, y)
    den = ((np.linalg.norm(b - b2, axis=-1) + dist)
           * (1 + geo.frame_norm(m, x, z) + geo.frame_norm(m, y, z2))
           + geo.frame_norm(m, y, pz - z2))
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    lip = float(np.max(ratio))
    x0 = region.center if d.anchor_x0 is None else np.asarray(d.anchor_x0, dtype=float)
    x0s = np.broadcast_to(x0, (samples, n))
    growth = geo.riemannian_norm(m, x0s, d(b, x0s, np.zeros((samples, n, dim_w))))
    l2 = float(np.max(growth))
    declared_L = d.lipschitz_L if np.isfinite(d.lipschitz_L) else np.inf
    margins = np.minimum(declared_L * (1 + 1e-9) - ratio, d.bound_L2 * (1 + 1e-9) - growth)
    rep = margin_report("drift_audit", margins, tolerance=0.0,
                        sample_fields={"x": x, "y": y, "b": b},
                        fitted_constants={"L_empirical": lip, "L2_empirical": l2},
                        params={"L": d.lipschitz_L, "L2": d.bound_L2, "samples": samples})
    return rep
