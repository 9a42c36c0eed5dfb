"""Chart based Riemannian geometry.

All operations broadcast over leading axes: a point is an array of shape
``(..., n)``, a tangent vector ``(..., n)`` and a frame ``(..., n, d)``.
Christoffel symbols are stored as ``gamma[..., k, i, j]`` (upper index first).

Two builtin charts are provided: flat space with the identity metric and the
round sphere of radius ``r`` in spherical coordinates ``(theta, phi)`` with
metric ``diag(r^2, r^2 sin^2 theta)``.  Custom charts are described by a
metric field; their Christoffel symbols come from central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AmbiguityError, ConvergenceError, DomainError, EscapeError, NumericalError
from .report import margin_report

MAX_STEP = 1e-3
FD_METRIC_STEP = 1e-5
SHOOT_MAX_ITER = 50
SHOOT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ChartManifold:
    """One coordinate chart carrying a metric and a torsion-free connection."""

    dim: int
    kind: str
    lower: np.ndarray
    upper: np.ndarray
    metric_fn: Callable[[np.ndarray], np.ndarray]
    christoffel_fn: Callable[[np.ndarray], np.ndarray] | None = None
    curvature_bound: float = 0.0
    radius: float | None = None
    injectivity_radius: float | None = None
    fd_step: float = FD_METRIC_STEP
    meta: dict = field(default_factory=dict)

    def contains(self, x, pad=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - pad) & (x <= self.upper + pad), axis=-1)

    def describe(self):
        out = {"kind": self.kind, "dim": self.dim,
               "chart_bounds": [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]}
        if self.radius is not None:
            out["radius"] = self.radius
        return out


def flat(dim, bounds=None):
    """Euclidean space R^dim; ``bounds`` is a list of (low, high) pairs."""
    if bounds is None:
        bounds = [(-np.inf, np.inf)] * dim
    lower, upper = np.array(bounds, dtype=float).T

    def metric(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    def christoffel(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return ChartManifold(dim, "flat", lower, upper, metric, christoffel,
                         curvature_bound=0.0, injectivity_radius=np.inf)


def sphere(radius=1.0, theta_min=0.1, phi_bounds=(-2 * np.pi, 2 * np.pi)):
    """Round sphere of the given radius in the chart (theta, phi).

    ``theta`` is kept in ``[theta_min, pi - theta_min]`` to stay away from the
    coordinate singularities at the poles.
    """
    r2 = radius * radius
    lower = np.array([theta_min, phi_bounds[0]], dtype=float)
    upper = np.array([np.pi - theta_min, phi_bounds[1]], dtype=float)

    def metric(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = r2
        g[..., 1, 1] = r2 * np.sin(x[..., 0]) ** 2
        return g

    def christoffel(x):
        x = np.asarray(x, dtype=float)
        th = x[..., 0]
        s, c = np.sin(th), np.cos(th)
        gam = np.zeros(x.shape[:-1] + (2, 2, 2))
        gam[..., 0, 1, 1] = -s * c
        gam[..., 1, 0, 1] = c / s
        gam[..., 1, 1, 0] = c / s
        return gam

    return ChartManifold(2, "sphere", lower, upper, metric, christoffel,
                         curvature_bound=1.0 / r2, radius=float(radius),
                         injectivity_radius=np.pi * radius)


def custom(metric, bounds, curvature_bound=0.0, vectorized=True, fd_step=FD_METRIC_STEP):
    """Chart defined by a user metric ``metric(x) -> (n, n)``.

    With ``vectorized=False`` the metric is evaluated point by point.
    """
    lower, upper = np.array(bounds, dtype=float).T
    dim = lower.size
    if vectorized:
        metric_fn = metric
    else:
        def metric_fn(x):
            x = np.asarray(x, dtype=float)
            flat_x = x.reshape(-1, dim)
            out = np.array([np.asarray(metric(p), dtype=float) for p in flat_x])
            return out.reshape(x.shape[:-1] + (dim, dim))
    return ChartManifold(dim, "custom", lower, upper, metric_fn, None,
                         curvature_bound=float(curvature_bound), fd_step=fd_step)


def _check_domain(m, x, what="point"):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.dim:
        raise DomainError(f"{what} has {x.shape[-1]} components, chart dimension is {m.dim}")
    inside = m.contains(x)
    if not np.all(inside):
        bad = np.asarray(x).reshape(-1, m.dim)[~np.asarray(inside).ravel()][0]
        raise DomainError(f"{what} {bad.tolist()} outside chart domain")
    return x


def metric_at(m, x):
    x = _check_domain(m, x)
    return np.asarray(m.metric_fn(x), dtype=float)


def christoffel_at(m: ChartManifold, x, step=None) -> np.ndarray:
    """Christoffel symbols ``gamma[..., k, i, j]`` at ``x``.

    Builtin charts use closed forms; custom charts differentiate the metric
    by central differences with the given ``step``.
    """
    x = _check_domain(m, x)
    if m.christoffel_fn is not None:
        return m.christoffel_fn(x)
    return _christoffel_from_metric(m.metric_fn, x, m.fd_step if step is None else step)


def _christoffel_from_metric(metric_fn, x, h):
    n = x.shape[-1]
    g = np.asarray(metric_fn(x), dtype=float)
    try:
        ginv = np.linalg.inv(g)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular metric") from exc
    if not np.all(np.isfinite(ginv)):
        raise NumericalError("singular metric")
    # dg[..., l, i, j] = d_l g_ij
    dg = np.empty(x.shape[:-1] + (n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dg[..., l, :, :] = (metric_fn(x + e) - metric_fn(x - e)) / (2 * h)
    # first kind: G[l, i, j] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    first = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg)
    gam = np.einsum("...kl,...lij->...kij", ginv, first)
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


def inner(m, x, u, w):
    """Riemannian inner product of vectors (or frames, column by column summed)."""
    g = metric_at(m, x)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if u.ndim == w.ndim and u.shape[-1] != m.dim:
        return np.einsum("...ij,...ia,...ja->...", g, u, w)
    return np.einsum("...ij,...i,...j->...", g, u, w)


def riemannian_norm(m: ChartManifold, x, z) -> np.ndarray:
    """``sqrt(z^T g(x) z)`` for tangent vectors of shape (..., n)."""
    g = metric_at(m, x)
    z = np.asarray(z, dtype=float)
    return np.sqrt(np.maximum(np.einsum("...ij,...i,...j->...", g, z, z), 0.0))


def frame_norm(m: ChartManifold, x, z) -> np.ndarray:
    """Norm of an n x d frame: square root of the summed squared column norms."""
    g = metric_at(m, x)
    z = np.asarray(z, dtype=float)
    return np.sqrt(np.maximum(np.einsum("...ij,...ia,...ja->...", g, z, z), 0.0))


def _acc(gam, v):
    return -np.einsum("...kij,...i,...j->...k", gam, v, v)


def _n_steps(t, step):
    t = abs(float(t))
    if t == 0.0:
        return 0, 0.0
    if step is None:
        step = min(MAX_STEP, t / 1000.0)
    n = max(1, int(math.ceil(t / step - 1e-12)))
    return n, t / n


def _rk4(m, x, v, t, step, frame=None, track_escape=True):
    """Integrate the geodesic (and optional transport) ODE over [0, t]."""
    n_steps, h = _n_steps(t, step)
    sign = 1.0 if t >= 0 else -1.0
    h *= sign
    gfn = m.christoffel_fn
    if gfn is None:
        def gfn(p):
            return _christoffel_from_metric(m.metric_fn, p, m.fd_step)

    def rhs(xx, vv, zz):
        gam = gfn(xx)
        a = _acc(gam, vv)
        dz = None if zz is None else -np.einsum("...kij,...i,...ja->...ka", gam, vv, zz)
        return vv, a, dz

    z = frame
    for k in range(n_steps):
        k1x, k1v, k1z = rhs(x, v, z)
        k2x, k2v, k2z = rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v,
                            None if z is None else z + 0.5 * h * k1z)
        k3x, k3v, k3z = rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v,
                            None if z is None else z + 0.5 * h * k2z)
        k4x, k4v, k4z = rhs(x + h * k3x, v + h * k3v, None if z is None else z + h * k3z)
        x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        if z is not None:
            z = z + (h / 6.0) * (k1z + 2 * k2z + 2 * k3z + k4z)
        if track_escape and not np.all(m.contains(x)):
            raise EscapeError("geodesic left the chart domain", exit_time=(k + 1) * abs(h))
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite state in geodesic integration")
    return x, v, z


def geodesic(m: ChartManifold, x, v, t=1.0, step=None, return_velocity=False):
    """Point ``gamma(t)`` of the geodesic with ``gamma(0)=x``, ``gamma'(0)=v``.

    Integrated by classical RK4 with fixed step ``min(1e-3, t/1000)`` unless
    ``step`` is given.  Flat charts use the straight line directly.
    """
    x = _check_domain(m, x)
    v = np.broadcast_to(np.asarray(v, dtype=float), np.broadcast_shapes(x.shape, np.shape(v)))
    x = np.broadcast_to(x, v.shape).copy()
    if m.kind == "flat":
        y = x + t * v
        if not np.all(m.contains(y)):
            raise EscapeError("straight line left the chart domain", exit_time=None)
        return (y, v.copy()) if return_velocity else y
    y, w, _ = _rk4(m, x, v.copy(), t, step)
    return (y, w) if return_velocity else y


# --- sphere closed forms -------------------------------------------------

def sphere_embed(m, x):
    """Embedding of sphere chart points into R^3 (radius included)."""
    x = np.asarray(x, dtype=float)
    th, ph = x[..., 0], x[..., 1]
    st = np.sin(th)
    return m.radius * np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)


def sphere_frame(m, x):
    """Embedded coordinate vectors (d/dtheta, d/dphi), shape (..., 3, 2)."""
    x = np.asarray(x, dtype=float)
    th, ph = x[..., 0], x[..., 1]
    r = m.radius
    e_th = r * np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=-1)
    e_ph = r * np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)], axis=-1)
    return np.stack([e_th, e_ph], axis=-1)


def sphere_chart(m, p, phi_ref=None):
    """Chart coordinates of embedded points ``p``; phi is unwrapped near ``phi_ref``."""
    p = np.asarray(p, dtype=float)
    u = p / np.linalg.norm(p, axis=-1, keepdims=True)
    th = np.arccos(np.clip(u[..., 2], -1.0, 1.0))
    ph = np.arctan2(u[..., 1], u[..., 0])
    if phi_ref is not None:
        ph = ph + 2 * np.pi * np.round((np.asarray(phi_ref) - ph) / (2 * np.pi))
    return np.stack([th, ph], axis=-1)


def sphere_vector_to_chart(m, x, w):
    """Chart components of an embedded tangent vector ``w`` at ``x``."""
    fr = sphere_frame(m, x)
    r2 = m.radius ** 2
    a = np.einsum("...c,...c->...", w, fr[..., 0])
    b = np.einsum("...c,...c->...", w, fr[..., 1])
    s2 = np.sin(np.asarray(x)[..., 0]) ** 2
    return np.stack([a / r2, b / (r2 * s2)], axis=-1)


def sphere_vector_to_embedded(m, x, v):
    fr = sphere_frame(m, x)
    return np.einsum("...ci,...i->...c", fr, v)


def _sphere_log(m, x, y):
    p = sphere_embed(m, x) / m.radius
    q = sphere_embed(m, y) / m.radius
    cosd = np.einsum("...c,...c->...", p, q)
    w = q - cosd[..., None] * p
    sind = np.linalg.norm(w, axis=-1)
    ang = np.arctan2(sind, cosd)
    if np.any(ang > np.pi - 1e-9):
        raise AmbiguityError("antipodal points have no unique connecting geodesic")
    scale = np.where(sind > 0, ang / np.where(sind > 0, sind, 1.0), 1.0)
    v_emb = m.radius * scale[..., None] * w
    return sphere_vector_to_chart(m, x, v_emb)


def _sphere_exp(m, x, v):
    p = sphere_embed(m, x) / m.radius
    w = sphere_vector_to_embedded(m, x, v) / m.radius
    nw = np.linalg.norm(w, axis=-1)
    safe = np.where(nw > 0, nw, 1.0)
    out = np.cos(nw)[..., None] * p + (np.sin(nw) / safe)[..., None] * w
    return sphere_chart(m, m.radius * out, phi_ref=np.asarray(x)[..., 1] + np.asarray(v)[..., 1])


def exp_map(m, x, v):
    """Time-one geodesic point; closed form on flat and sphere charts, ODE otherwise."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if m.kind == "flat":
        return x + v
    if m.kind == "sphere":
        return _sphere_exp(m, x, v)
    return geodesic(m, x, v, 1.0)


def geodesic_connect(m: ChartManifold, x, y, step=None, tol=SHOOT_TOL, max_iter=SHOOT_MAX_ITER):
    """Initial velocity ``v`` of the geodesic from ``x`` reaching ``y`` at time one."""
    x = _check_domain(m, x)
    y = _check_domain(m, y, "target point")
    shape = np.broadcast_shapes(x.shape, y.shape)
    x = np.broadcast_to(x, shape)
    y = np.broadcast_to(y, shape)
    if m.kind == "flat":
        return y - x
    if m.kind == "sphere":
        return _sphere_log(m, x, y)
    return _shoot(m, x, y, step, tol, max_iter)


def _shoot(m, x, y, step, tol, max_iter):
    """Damped Gauss-Newton shooting on the endpoint mismatch."""
    n = m.dim
    v = (y - x).copy()
    h = 1e-6
    residuals = []

    def endpoint(vv):
        return geodesic(m, x, vv, 1.0, step=step)

    r = endpoint(v) - y
    for _ in range(max_iter):
        err = np.max(np.abs(r)) if r.size else 0.0
        residuals.append(float(err))
        if err < tol:
            return v
        jac = np.empty(r.shape + (n,))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            jac[..., :, j] = (endpoint(v + e) - endpoint(v - e)) / (2 * h)
        try:
            dv = -np.linalg.solve(jac, r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular shooting Jacobian", residuals) from exc
        lam = np.ones(r.shape[:-1] + (1,))
        base = np.linalg.norm(r, axis=-1, keepdims=True)
        for _ in range(12):
            trial_v = v + lam * dv
            try:
                trial_r = endpoint(trial_v) - y
            except EscapeError:
                lam = lam / 2
                continue
            worse = np.linalg.norm(trial_r, axis=-1, keepdims=True) > base
            if not np.any(worse):
                break
            lam = np.where(worse, lam / 2, lam)
        v, r = trial_v, trial_r
    residuals.append(float(np.max(np.abs(r))))
    if residuals[-1] < tol:
        return v
    raise ConvergenceError("geodesic shooting did not converge", residuals)


def parallel_transport(m: ChartManifold, x, y, z, step=None):
    """Transport ``z`` (vector or n x d frame) from ``x`` to ``y`` along the connecting geodesic."""
    x = _check_domain(m, x)
    y = _check_domain(m, y, "target point")
    z = np.asarray(z, dtype=float)
    is_vec = z.shape[-1] == m.dim and (z.ndim == 1 or z.ndim == x.ndim)
    frame = z[..., None] if is_vec else z
    if m.kind == "flat":
        out = np.broadcast_to(frame, np.broadcast_shapes(x.shape[:-1], frame.shape[:-2]) + frame.shape[-2:]).copy()
        return out[..., 0] if is_vec else out
    v = geodesic_connect(m, x, y, step=step)
    batch = np.broadcast_shapes(v.shape[:-1], frame.shape[:-2])
    xs = np.broadcast_to(x, batch + (m.dim,)).copy()
    vs = np.broadcast_to(v, batch + (m.dim,)).copy()
    fs = np.broadcast_to(frame, batch + frame.shape[-2:]).copy()
    _, _, out = _rk4(m, xs, vs, 1.0, step, frame=fs)
    return out[..., 0] if is_vec else out


def distance(m: ChartManifold, x, y) -> np.ndarray:
    """Riemannian distance; closed form for flat and sphere charts."""
    x = _check_domain(m, x)
    y = _check_domain(m, y, "target point")
    if m.kind == "flat":
        return np.linalg.norm(y - x, axis=-1)
    if m.kind == "sphere":
        p = sphere_embed(m, x)
        q = sphere_embed(m, y)
        cr = np.linalg.norm(np.cross(p, q), axis=-1)
        dt = np.einsum("...c,...c->...", p, q)
        return m.radius * np.arctan2(cr, dt)
    v = geodesic_connect(m, x, y)
    return riemannian_norm(m, x, v)


# --- sampling helpers -----------------------------------------------------

def random_unit_vectors(m, x, rng, count=None):
    """Riemannian unit tangent vectors at ``x`` (one per point of the batch)."""
    x = np.asarray(x, dtype=float)
    raw = rng.standard_normal(x.shape)
    return raw / riemannian_norm(m, x, raw)[..., None]


def sample_ball(m, center, radius, count, rng, min_radius=0.0):
    """Points of the geodesic ball ``B(center, radius)``, uniform in radius^dim."""
    center = np.asarray(center, dtype=float)
    c = np.broadcast_to(center, (count, m.dim))
    u = random_unit_vectors(m, c, rng)
    frac = rng.uniform(0.0, 1.0, size=count) ** (1.0 / m.dim)
    rad = min_radius + (radius - min_radius) * frac
    return exp_map(m, c, rad[:, None] * u)


def sample_pairs(m, rng, count, center, region_radius, dist_range, arc_margin=None):
    """Pairs ``(x, y)`` with ``x`` in a ball and ``d(x, y)`` uniform in ``dist_range``.

    On sphere charts pairs whose great-circle arc approaches the chart
    boundary closer than ``arc_margin`` are rejected so that ODE transport
    along the arc stays inside the chart.
    """
    xs, ys = [], []
    got = 0
    lo, hi = dist_range
    for _ in range(200):
        need = count - got
        if need <= 0:
            break
        batch = max(2 * need, 16)
        x = sample_ball(m, center, region_radius, batch, rng)
        d = rng.uniform(lo, hi, size=batch)
        u = random_unit_vectors(m, x, rng)
        y = exp_map(m, x, d[:, None] * u)
        ok = m.contains(y) & m.contains(x)
        if m.kind == "sphere":
            ok &= _arc_inside(m, x, d[:, None] * u, arc_margin if arc_margin is not None else 0.05)
        xs.append(x[ok])
        ys.append(y[ok])
        got += int(ok.sum())
    x = np.concatenate(xs)[:count]
    y = np.concatenate(ys)[:count]
    if len(x) < count:
        raise DomainError("could not sample enough pairs inside the chart")
    return x, y


def _arc_inside(m, x, v, margin, checks=64):
    ok = np.ones(x.shape[:-1], dtype=bool)
    for s in np.linspace(0.0, 1.0, checks):
        p = _sphere_exp(m, x, s * v)
        ok &= m.contains(p, pad=-margin)
    return ok


def transport_comparison_margin(m: ChartManifold, x, y, z, z2=None, C=None):
    """Smallest constants validating the parallel-transport comparison bounds.

    Reports ``max |P z - z| / (d(x,y) |z|)`` (Euclidean norms) as ``C_tp3``
    and ``max |z - z'| / (|P z - z'|_r + d (|z|_r + |z'|_r))`` as ``C_tp2``.
    The margin is ``C - ratio`` for the declared ``C`` (default: the larger
    fitted constant), so a flat chart gives ratio 0 for the first bound.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if z2 is None:
        z2 = z
    pz = parallel_transport(m, x, y, z)
    d = distance(m, x, y)
    nz = np.linalg.norm(z, axis=-1)
    num3 = np.linalg.norm(pz - z, axis=-1)
    den3 = d * nz
    r3 = np.where(den3 > 0, num3 / np.where(den3 > 0, den3, 1.0), 0.0)
    num2 = np.linalg.norm(z - z2, axis=-1)
    den2 = riemannian_norm(m, y, pz - z2) + d * (riemannian_norm(m, x, z) + riemannian_norm(m, y, z2))
    r2 = np.where(den2 > 0, num2 / np.where(den2 > 0, den2, 1.0), 0.0)
    c3 = float(np.max(r3)) if r3.size else 0.0
    c2 = float(np.max(r2)) if r2.size else 0.0
    declared = max(c3, c2) if C is None else float(C)
    margins = declared - np.maximum(r3, r2)
    return margin_report(
        "transport_comparison", margins,
        sample_fields={"x": x, "y": y, "z": z},
        fitted_constants={"C_tp3": c3, "C_tp2": c2, "C": declared},
        details={"max_ratio": max(c3, c2)},
    )


def scalar_gradient(fn, x, step=1e-5):
    """Coordinate differential of a vectorised scalar function by central differences."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = step
        out[..., k] = (fn(x + e) - fn(x - e)) / (2 * step)
    return out


def covariant_hessian(m: ChartManifold, fn, x, u, step=1e-3):
    """``u^T (d^2 fn - Gamma . d fn) u`` with a Richardson-extrapolated second difference."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def d2(h):
        f0 = fn(x)
        return (fn(x + h * u) - 2 * f0 + fn(x - h * u)) / h ** 2

    coord = (4.0 * d2(step / 2) - d2(step)) / 3.0
    gam = christoffel_at(m, x)
    corr = np.einsum("...kij,...i,...j->...k", gam, u, u)
    return coord - np.einsum("...k,...k->...", corr, scalar_gradient(fn, x))


def sphere_transport(m, x, y, z):
    """Closed-form parallel transport along the minimal great-circle arc (vector or frame)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    is_vec = z.shape[-1] == m.dim and (z.ndim == 1 or z.ndim == x.ndim)
    frame = z[..., None] if is_vec else z
    p = sphere_embed(m, x) / m.radius
    q = sphere_embed(m, y) / m.radius
    c = np.einsum("...c,...c->...", p, q)
    w = q - c[..., None] * p
    s = np.linalg.norm(w, axis=-1)
    safe = np.where(s > 1e-15, s, 1.0)
    t0 = w / safe[..., None]
    t1 = (c[..., None] * q - p) / safe[..., None]
    emb = np.einsum("...ci,...ia->...ca", sphere_frame(m, x), frame)
    along = np.einsum("...c,...ca->...a", t0, emb)
    moved = emb + (t1 - t0)[..., None] * along[..., None, :]
    moved = np.where((s > 1e-15)[..., None, None], moved, emb)
    fr_y = sphere_frame(m, y)
    r2 = m.radius ** 2
    s2 = np.sin(y[..., 0]) ** 2
    comp0 = np.einsum("...c,...ca->...a", fr_y[..., 0], moved) / r2
    comp1 = np.einsum("...c,...ca->...a", fr_y[..., 1], moved) / (r2 * s2)[..., None]
    out = np.stack([comp0, comp1], axis=-2)
    return out[..., 0] if is_vec else out


def _transport_ratio(m, x, y):
    """``|P - I|`` (operator norm, chart coordinates) divided by ``d(x, y)``."""
    eye = np.broadcast_to(np.eye(m.dim), x.shape[:-1] + (m.dim, m.dim))
    if m.kind == "sphere":
        P = sphere_transport(m, x, y, eye)
    else:
        P = parallel_transport(m, x, y, eye)
    d = distance(m, x, y)
    op = np.linalg.norm(P - eye, ord=2, axis=(-2, -1))
    return np.where(d > 0, op / np.where(d > 0, d, 1.0), 0.0)


def fit_transport_constant(m: ChartManifold, center, region_radius, dist_range, samples, rng,
                           top=20, refine_steps=150):
    """Fitted constant ``C`` of ``|P z - z| <= C d(x, y) |z|`` on a geodesic ball.

    Uses the worst case over ``z`` at every sampled pair, then refines the
    ``top`` pairs by a shrinking random local search that stays inside the
    ball and the distance range.  Returns ``(C, x, y)`` at the maximizer.
    """
    center = np.asarray(center, dtype=float)
    lo, hi = dist_range
    x, y = sample_pairs(m, rng, samples, center, region_radius, dist_range)
    r = _transport_ratio(m, x, y)
    best = np.argsort(r)[-top:]
    bx = x[best]
    bv = geodesic_connect(m, bx, y[best])
    br = r[best]
    for k in range(refine_steps):
        scale = 0.05 * (1e-3 / 0.05) ** (k / max(refine_steps - 1, 1))
        cx = exp_map(m, bx, scale * random_unit_vectors(m, bx, rng))
        cv = bv + scale * rng.standard_normal(bv.shape)
        ok = m.contains(cx) & (distance(m, np.broadcast_to(center, cx.shape), cx) <= region_radius)
        nv = riemannian_norm(m, np.where(ok[:, None], cx, bx), cv)
        ok &= (nv >= lo) & (nv <= hi) & (nv > 0)
        cx = np.where(ok[:, None], cx, bx)
        cv = np.where(ok[:, None], cv, bv)
        cy = exp_map(m, cx, cv)
        ok &= m.contains(cy)
        if m.kind == "sphere":
            ok &= _arc_inside(m, cx, cv, 0.05, checks=16)
        cr = np.where(ok, _transport_ratio(m, cx, np.where(ok[:, None], cy, exp_map(m, bx, bv))), -np.inf)
        up = cr > br
        bx[up], bv[up], br[up] = cx[up], cv[up], cr[up]
    i = int(np.argmax(br))
    return float(br[i]), bx[i], exp_map(m, bx[i], bv[i])
