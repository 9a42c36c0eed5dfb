"""Probabilistic solution of nonlinear Dirichlet problems through stopped BSDEs.

For a query point ``x`` the driving diffusion is started at ``x`` and stopped
when it leaves the source domain.  The BSDE with terminal value the boundary
data at the exit point is solved backward and ``phi(x)`` is its value at time
zero.  Paths that are still inside at the horizon cap use the boundary point
nearest to their final position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bsde
from . import forward_sde as fsde
from . import geometry as geo
from .errors import DomainError, ReliabilityError, UnsupportedError

TRUNCATION_LIMIT = 0.10
BOUNDARY_TOL = 1e-12


# --- source domains ------------------------------------------------------------

@dataclass(frozen=True)
class SourceDomain:
    """Bounded region of R^d described by kind and parameters.

    ``disk`` uses ``center`` and ``radius``; ``interval`` and ``box`` use
    ``low`` and ``high`` (a box of dimension one is an interval).
    """

    kind: str
    center: np.ndarray | None = None
    radius: float | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    @property
    def dim(self):
        if self.kind == "disk":
            return int(self.center.size)
        return int(self.low.size)

    def signed_gap(self, x):
        """Distance to the boundary, positive inside and negative outside."""
        x = np.asarray(x, dtype=float)
        if self.kind == "disk":
            return self.radius - np.linalg.norm(x - self.center, axis=-1)
        inner = np.minimum(x - self.low, self.high - x)
        return np.min(inner, axis=-1)

    def inside(self, x):
        """Open domain membership."""
        return self.signed_gap(x) > BOUNDARY_TOL

    def on_boundary(self, x, tol=1e-9):
        return np.abs(self.signed_gap(x)) <= tol

    def nearest_boundary(self, x):
        """Closest boundary point, for points inside or outside."""
        x = np.asarray(x, dtype=float)
        if self.kind == "disk":
            v = x - self.center
            r = np.linalg.norm(v, axis=-1, keepdims=True)
            e = np.zeros_like(v)
            e[..., 0] = 1.0
            u = np.where(r > 0, v / np.where(r > 0, r, 1.0), e)
            return self.center + self.radius * u
        y = np.clip(x, self.low, self.high)
        inner = np.all((x > self.low) & (x < self.high), axis=-1)
        if np.any(inner):
            xi = x[inner]
            lo = xi - self.low
            hi = self.high - xi
            gaps = np.concatenate([lo, hi], axis=-1)
            k = np.argmin(gaps, axis=-1)
            d = self.low.size
            rows = np.arange(xi.shape[0])
            proj = xi.copy()
            low_side = k < d
            proj[rows[low_side], k[low_side]] = self.low[k[low_side]]
            proj[rows[~low_side], k[~low_side] - d] = self.high[k[~low_side] - d]
            y[inner] = proj
        return y

    @property
    def diameter(self):
        if self.kind == "disk":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.high - self.low))


def disk(center=(0.0, 0.0), radius=1.0):
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise DomainError("disk radius must be positive")
    return SourceDomain("disk", center=center, radius=float(radius))


def box(low, high):
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    if low.shape != high.shape or np.any(high <= low):
        raise DomainError("box needs low < high componentwise")
    return SourceDomain("box", low=low, high=high)


def interval(low=-1.0, high=1.0):
    d = box([low], [high])
    return SourceDomain("interval", low=d.low, high=d.high)


# --- boundary maps -------------------------------------------------------------

def coordinate_map(k=0):
    """Boundary data ``x_k`` into a one-dimensional flat target."""
    return lambda x: np.asarray(x, dtype=float)[..., k:k + 1]


def harmonic_quadratic_map():
    """Boundary data ``x^2 - y^2``."""
    def F(x):
        x = np.asarray(x, dtype=float)
        return (x[..., 0] ** 2 - x[..., 1] ** 2)[..., None]
    return F


def constant_map(p):
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return lambda x: np.broadcast_to(p, np.shape(x)[:-1] + p.shape).copy()


def linear_map(A, offset=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    offset = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    return lambda x: np.asarray(x, dtype=float) @ A.T + offset


# --- problem and estimate ------------------------------------------------------

@dataclass
class DirichletProblem:
    """Source domain, driving diffusion, boundary data, drift and target."""

    source_domain: SourceDomain
    diffusion: fsde.DiffusionSpec
    boundary_map: Callable[[np.ndarray], np.ndarray]
    drift: bsde.DriftSpec
    target: geo.ChartManifold
    horizon_cap: float
    target_domain: bsde.DomainGauge | None = None

    def __post_init__(self):
        if not np.isfinite(self.horizon_cap) or self.horizon_cap <= 0:
            raise DomainError("horizon_cap must be finite and positive")
        if self.diffusion.dim_d != self.source_domain.dim:
            raise DomainError("diffusion and source domain dimensions differ")


@dataclass
class FieldEstimate:
    query_points: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    truncation_mass: np.ndarray
    details: list = field(default_factory=list)

    def rows(self):
        """One flat row per query point: coordinates, values, SE, truncation."""
        out = []
        for k in range(self.query_points.shape[0]):
            out.append(list(self.query_points[k]) + list(self.values[k])
                       + [float(np.max(self.std_errors[k])), float(self.truncation_mass[k])])
        return out

    def columns(self):
        d = self.query_points.shape[1]
        n = self.values.shape[1]
        return [f"x{j}" for j in range(d)] + [f"value{j}" for j in range(n)] + ["std_error", "truncation_mass"]


def _terminal_values(p: DirichletProblem, pts):
    U = np.asarray(p.boundary_map(p.source_domain.nearest_boundary(pts)), dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if p.target_domain is not None and not np.all(p.target_domain.contains(U, band=1e-9)):
        raise DomainError("boundary map leaves the target sublevel set")
    return U


def solve_point(p: DirichletProblem, x, grid, P, seed, workers=None):
    """``(value, std_error, truncation_mass, details)`` at one query point."""
    x = np.asarray(x, dtype=float)
    dom = p.source_domain
    if dom.on_boundary(x):
        U = _terminal_values(p, x[None, :])[0]
        return U, np.zeros_like(U), 0.0, {"on_boundary": True}
    if not dom.inside(x):
        raise DomainError(f"query point {x.tolist()} lies outside the source domain")
    B, W = fsde.simulate_diffusion(p.diffusion.started_at(x), grid, P, seed, workers)
    idx = fsde.hitting_time(B, dom.inside)
    N = grid.size - 1
    last_inside = dom.inside(B.paths[:, N])
    truncated = (idx == N) & last_inside
    mass = float(truncated.mean())
    if mass > TRUNCATION_LIMIT:
        raise ReliabilityError(f"{mass:.1%} of paths do not exit before T_max={grid[-1]:g}")
    exit_pts = B.paths[np.arange(P), idx]
    U = _terminal_values(p, exit_pts)
    sol = bsde.solve_on_paths(p.target, p.drift, B, W, U, domain=p.target_domain, stop_index=idx)
    info = {"on_boundary": False, "picard_iterations": len(sol.picard_residuals),
            "projection_fraction": sol.projection_fraction,
            "mean_exit_time": float(grid[idx].mean()), "warnings": list(sol.warnings)}
    return sol.x0, sol.x0_std_error, mass, info


def solve_dirichlet(p: DirichletProblem, grid, P, seed, query_points=None, workers=None) -> FieldEstimate:
    """Estimate ``phi`` at each query point; every point reuses the same noise seed."""
    grid = fsde.check_grid(grid)
    if grid[-1] > p.horizon_cap * (1 + 1e-12):
        raise DomainError("grid extends past the horizon cap")
    if query_points is None:
        query_points = np.atleast_2d(p.diffusion.start_y)
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    vals, ses, mass, info = [], [], [], []
    for x in q:
        v, s, t, d = solve_point(p, x, grid, P, seed, workers)
        vals.append(np.atleast_1d(v))
        ses.append(np.atleast_1d(s))
        mass.append(t)
        info.append(d)
    return FieldEstimate(q, np.array(vals), np.array(ses), np.array(mass), info)


def stopping_integrability(p: DirichletProblem, grid, P, xi, seed=0, start=None, workers=None):
    """Monte-Carlo ``E exp(xi * zeta)`` for the exit time, truncated at the grid end.

    Returns the :class:`ExpMoment` report together with the truncation mass.
    """
    grid = fsde.check_grid(grid)
    spec = p.diffusion if start is None else p.diffusion.started_at(start)
    idx, exited, _ = fsde.simulate_exit_indices(spec, grid, P, seed, p.source_domain.inside,
                                                workers=workers)
    zeta = grid[idx]
    rep = fsde.exp_moment(zeta, xi)
    return rep, float(np.mean(~exited))


# --- generator residual --------------------------------------------------------

def _grid_axes(points):
    axes = [np.unique(points[:, j]) for j in range(points.shape[1])]
    if int(np.prod([a.size for a in axes])) != points.shape[0]:
        raise DomainError("query points do not form a regular grid")
    return axes


def pde_residual(est: FieldEstimate, p: DirichletProblem, k=3.0):
    """Finite-difference ``L phi - f(x, phi, D phi sigma)`` at interior grid nodes.

    Only flat targets are supported.  Standard errors of the stencil are
    combined as if the node estimates were independent.
    """
    if p.target.kind != "flat":
        raise UnsupportedError("generator residuals are only available for flat targets")
    pts = est.query_points
    axes = _grid_axes(pts)
    d = pts.shape[1]
    n = est.values.shape[1]
    shape = tuple(a.size for a in axes)
    if min(shape) < 3:
        raise DomainError("need at least three grid nodes per axis")
    h = np.array([a[1] - a[0] for a in axes])
    if not all(np.allclose(np.diff(a), hj) for a, hj in zip(axes, h)):
        raise DomainError("grid spacing must be uniform per axis")
    pos = np.stack([np.searchsorted(a, pts[:, j]) for j, a in enumerate(axes)], axis=1)
    V = np.empty(shape + (n,))
    S = np.empty(shape + (n,))
    V[tuple(pos.T)] = est.values
    S[tuple(pos.T)] = est.std_errors

    nodes, res, cse = [], [], []
    for idx in np.ndindex(*shape):
        if any(i == 0 or i == s - 1 for i, s in zip(idx, shape)):
            continue
        x = np.array([a[i] for a, i in zip(axes, idx)])
        weights = {}

        def add(offset, w):
            key = tuple(np.add(idx, offset))
            weights[key] = weights.get(key, 0.0) + w

        sig = p.diffusion.vol_sigma(x[None, :])[0]
        a = sig @ sig.T
        b = p.diffusion.drift_b(x[None, :])[0]
        grad_w = []
        for j in range(d):
            e = np.zeros(d, dtype=int)
            e[j] = 1
            add(e, 0.5 * a[j, j] / h[j] ** 2 + b[j] / (2 * h[j]))
            add(-e, 0.5 * a[j, j] / h[j] ** 2 - b[j] / (2 * h[j]))
            add(0 * e, -a[j, j] / h[j] ** 2)
            grad_w.append((V[tuple(np.add(idx, e))] - V[tuple(np.subtract(idx, e))]) / (2 * h[j]))
            for l in range(j + 1, d):
                f = np.zeros(d, dtype=int)
                f[l] = 1
                c = a[j, l] / (4 * h[j] * h[l])
                add(e + f, c)
                add(-e - f, c)
                add(e - f, -c)
                add(f - e, -c)
        Lphi = sum(w * V[key] for key, w in weights.items())
        var = sum(w ** 2 * S[key] ** 2 for key, w in weights.items())
        jac = np.stack(grad_w, axis=-1)
        z = jac @ sig
        fval = p.drift(x[None, :], V[idx][None, :], z[None])[0]
        nodes.append(x)
        res.append(Lphi - fval)
        cse.append(np.sqrt(var))
    res = np.array(res)
    cse = np.array(cse)
    ok = np.abs(res) <= k * cse + 1e-12
    return {"nodes": np.array(nodes), "residual": res, "combined_se": cse,
            "max_abs": float(np.max(np.abs(res))), "passed": bool(np.all(ok))}


def regular_query_grid(domain: SourceDomain, per_axis=5, shrink=0.9):
    """Regular grid of query points inside the domain (disk: inscribed square)."""
    if domain.kind == "disk":
        half = shrink * domain.radius / np.sqrt(domain.dim)
        lows = domain.center - half
        highs = domain.center + half
    else:
        mid = 0.5 * (domain.low + domain.high)
        half = 0.5 * shrink * (domain.high - domain.low)
        lows, highs = mid - half, mid + half
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(np.atleast_1d(lows), np.atleast_1d(highs))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
