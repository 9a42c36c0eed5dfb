"""Two-point convex gauge functions on a product chart and their derivatives.

A gauge is a nonnegative function ``psi(x, y)`` on ``M x M`` vanishing on the
diagonal.  Points of the product chart are written ``(x, y)``, each of shape
``(..., n)``; product tangent vectors are ``u = (u0, u1)`` of shape
``(..., 2n)``.

The Hessian always refers to the covariant Hessian of the product
connection, ``d_ab psi - Gbar^c_ab d_c psi``, whose Christoffel symbols are
block diagonal (those of ``x`` on the first block, those of ``y`` on the
second).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry as geo
from .errors import DomainError

GRAD_STEP = 1e-4
HESS_STEP = 1e-3
DIAGONAL_BAND = 1e-3


@dataclass(frozen=True, eq=False)
class GaugeFunction:
    """Descriptor of a gauge; build instances with the module constructors."""

    kind: str
    order: float
    manifold: geo.ChartManifold | None = None
    eps: float | None = None
    a: float | None = None
    curvature: float | None = None
    center: np.ndarray | None = None
    fn: Callable | None = None
    smooth_on_diagonal: bool = True


def emery(eps=0.1, center=None):
    """Convex gauge ``1/2 (eps^2 + |y - c|^2) |x - y|^2`` (order 2).

    ``center`` is the chart point ``c`` playing the role of the origin of
    the normal coordinates; defaults to the chart origin.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    return GaugeFunction("emery", 2, eps=float(eps),
                         center=None if center is None else np.asarray(center, dtype=float))


def sin_power(m, a, curvature=None):
    """``sin(sqrt(K) d(x, y) / 2) ** a`` with ``1 < a < 2``.

    Not smooth on the diagonal; Hessians are only defined for ``d > 1e-3``.
    """
    if not 1.0 < a < 2.0:
        raise DomainError(f"sin_power exponent must satisfy 1 < a < 2, got {a}")
    K = m.curvature_bound if curvature is None else float(curvature)
    if K <= 0:
        raise DomainError("sin_power gauge needs a positive curvature bound")
    return GaugeFunction("sin_power", float(a), manifold=m, a=float(a), curvature=K,
                         smooth_on_diagonal=False)


def distance_squared(m):
    return GaugeFunction("distance_squared", 2, manifold=m)


def distance_gauge(m):
    """The distance itself (order 1); handy for certifying distance Hessians."""
    return GaugeFunction("distance", 1, manifold=m, smooth_on_diagonal=False)


def custom(fn, order, smooth_on_diagonal=True):
    """Gauge given by a vectorised ``fn(x, y)``."""
    return GaugeFunction("custom", order, fn=fn, smooth_on_diagonal=smooth_on_diagonal)


def default_exponent(e):
    """Exponent ``a = 1 + (e - 1)/4``, strictly inside ``a < 1 + (e - 1)/2``."""
    if e <= 1:
        raise DomainError("e must exceed 1")
    return 1.0 + (e - 1.0) / 4.0


def gauge_value(g: GaugeFunction, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if g.kind == "emery":
        c = 0.0 if g.center is None else g.center
        d = x - y
        w = y - c
        return 0.5 * (g.eps ** 2 + np.sum(w * w, axis=-1)) * np.sum(d * d, axis=-1)
    if g.kind == "sin_power":
        dist = geo.distance(g.manifold, x, y)
        return np.sin(np.sqrt(g.curvature) * dist / 2.0) ** g.a
    if g.kind == "distance_squared":
        return geo.distance(g.manifold, x, y) ** 2
    if g.kind == "distance":
        return geo.distance(g.manifold, x, y)
    return np.asarray(g.fn(x, y), dtype=float)


def _value_on_product(g, pts):
    n = pts.shape[-1] // 2
    return gauge_value(g, pts[..., :n], pts[..., n:])


def _analytic(g):
    if g.kind == "emery":
        return True
    return g.kind == "distance_squared" and g.manifold is not None and g.manifold.kind == "flat"


def gauge_gradient(g: GaugeFunction, x, y, step=GRAD_STEP) -> np.ndarray:
    """Coordinate gradient ``(d_x psi, d_y psi)``, shape (..., 2n)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    if g.kind == "emery":
        c = 0.0 if g.center is None else g.center
        d = x - y
        w = y - c
        s = g.eps ** 2 + np.sum(w * w, axis=-1, keepdims=True)
        q = np.sum(d * d, axis=-1, keepdims=True)
        return np.concatenate([s * d, q * w - s * d], axis=-1)
    if _analytic(g):
        d = x - y
        return np.concatenate([2 * d, -2 * d], axis=-1)
    pts = np.concatenate([x, y], axis=-1)
    n2 = pts.shape[-1]
    grad = np.empty(pts.shape)
    for k in range(n2):
        e = np.zeros(n2)
        e[k] = step
        grad[..., k] = (_value_on_product(g, pts + e) - _value_on_product(g, pts - e)) / (2 * step)
    return grad


def _coordinate_hessian(g, x, y, step):
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    n = x.shape[-1]
    if g.kind == "emery":
        c = 0.0 if g.center is None else g.center
        d = x - y
        w = y - c
        s = g.eps ** 2 + np.sum(w * w, axis=-1)
        q = np.sum(d * d, axis=-1)
        eye = np.eye(n)
        A = s[..., None, None] * eye
        E = 2 * d[..., :, None] * w[..., None, :] - s[..., None, None] * eye
        B = (q + s)[..., None, None] * eye - 2 * (w[..., :, None] * d[..., None, :] + d[..., :, None] * w[..., None, :])
        top = np.concatenate([A, E], axis=-1)
        bot = np.concatenate([np.swapaxes(E, -1, -2), B], axis=-1)
        return np.concatenate([top, bot], axis=-2)
    if _analytic(g):
        eye = np.eye(n)
        blk = np.block([[eye, -eye], [-eye, eye]]) * 2.0
        return np.broadcast_to(blk, x.shape[:-1] + (2 * n, 2 * n)).copy()
    pts = np.concatenate([x, y], axis=-1)

    def second(h):
        n2 = pts.shape[-1]
        f0 = _value_on_product(g, pts)
        H = np.empty(pts.shape[:-1] + (n2, n2))
        for a in range(n2):
            ea = np.zeros(n2)
            ea[a] = h
            H[..., a, a] = (_value_on_product(g, pts + ea) - 2 * f0 + _value_on_product(g, pts - ea)) / h ** 2
            for b in range(a + 1, n2):
                eb = np.zeros(n2)
                eb[b] = h
                val = (_value_on_product(g, pts + ea + eb) - _value_on_product(g, pts + ea - eb)
                       - _value_on_product(g, pts - ea + eb) + _value_on_product(g, pts - ea - eb)) / (4 * h * h)
                H[..., a, b] = val
                H[..., b, a] = val
        return H

    return (4.0 * second(step / 2) - second(step)) / 3.0


def product_christoffel(m, x, y) -> np.ndarray:
    """Christoffel symbols of the product connection, ``[..., c, a, b]`` on 2n indices."""
    gx = geo.christoffel_at(m, x)
    gy = geo.christoffel_at(m, y)
    gx, gy = np.broadcast_arrays(gx, gy)
    n = m.dim
    out = np.zeros(gx.shape[:-3] + (2 * n, 2 * n, 2 * n))
    out[..., :n, :n, :n] = gx
    out[..., n:, n:, n:] = gy
    return out


def _check_off_diagonal(g, x, y):
    if g.smooth_on_diagonal:
        return
    d = geo.distance(g.manifold, x, y)
    if np.any(d <= DIAGONAL_BAND):
        raise DomainError(f"{g.kind} gauge is not smooth on the diagonal (distance <= {DIAGONAL_BAND})")


def hessian_matrix(g: GaugeFunction, m, x, y, step=HESS_STEP) -> np.ndarray:
    """Full covariant Hessian on the product chart, shape (..., 2n, 2n)."""
    _check_off_diagonal(g, x, y)
    H = _coordinate_hessian(g, x, y, step)
    grad = gauge_gradient(g, x, y)
    gam = product_christoffel(m, x, y)
    return H - np.einsum("...cab,...c->...ab", gam, grad)


def gauge_hessian(g: GaugeFunction, m, x, y, u, step=HESS_STEP) -> np.ndarray:
    """Quadratic form ``u^T Hess psi(x, y) u`` for product vectors ``u``.

    Analytic for Emery's gauge and the flat squared distance.  Otherwise the
    coordinate part is a central second difference along ``u`` (Richardson
    extrapolated over ``step`` and ``step/2``) and the connection part uses
    the finite-difference gradient.  Steps shrink near the diagonal for
    gauges that are singular there.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_off_diagonal(g, x, y)
    if _analytic(g):
        H = hessian_matrix(g, m, x, y)
        return np.einsum("...a,...ab,...b->...", u, H, u)
    x, y, u0 = np.broadcast_arrays(x, y, u[..., : x.shape[-1]])
    u = np.broadcast_to(u, x.shape[:-1] + (2 * x.shape[-1],))
    pts = np.concatenate([x, y], axis=-1)
    h = np.full(pts.shape[:-1], float(step))
    if not g.smooth_on_diagonal:
        h = np.minimum(h, 0.05 * geo.distance(g.manifold, x, y))
    scale = np.sqrt(np.sum(u * u, axis=-1))
    scale = np.where(scale > 0, scale, 1.0)
    dirn = u / scale[..., None]

    def d2(hh):
        hv = hh[..., None] * dirn
        f0 = _value_on_product(g, pts)
        return (_value_on_product(g, pts + hv) - 2 * f0 + _value_on_product(g, pts - hv)) / hh ** 2

    coord = (4.0 * d2(h / 2) - d2(h)) / 3.0 * scale ** 2
    gam = product_christoffel(m, x, y)
    corr = np.einsum("...cab,...a,...b->...c", gam, u, u)
    grad = gauge_gradient(g, x, y)
    return coord - np.einsum("...c,...c->...", corr, grad)


@dataclass
class HessianBlocks:
    """Hessian blocks in the coordinates ``v = (x - y, y)``."""

    A_tilde: np.ndarray
    B_tilde: np.ndarray
    E_tilde: np.ndarray
    full: np.ndarray

    def matrix(self):
        top = np.concatenate([self.A_tilde, self.E_tilde], axis=-1)
        bot = np.concatenate([np.swapaxes(self.E_tilde, -1, -2), self.B_tilde], axis=-1)
        return np.concatenate([top, bot], axis=-2)


def hessian_blocks(g: GaugeFunction, m, x, y) -> HessianBlocks:
    """Blocks of the covariant Hessian after the linear change to ``v`` coordinates.

    With ``(z, z') = (w0 + w1, w1)`` the quadratic form becomes
    ``w^T [[A, A + E], [A + E^T, A + E + E^T + B]] w`` where ``A, E, B`` are
    the blocks in the original product coordinates.
    """
    H = hessian_matrix(g, m, x, y)
    n = H.shape[-1] // 2
    A = H[..., :n, :n]
    E = H[..., :n, n:]
    B = H[..., n:, n:]
    Et = A + E
    Bt = A + E + np.swapaxes(E, -1, -2) + B
    return HessianBlocks(A.copy(), Bt, Et, H)


# --- the ratio lemma ----------------------------------------------------------

def sinc_h(t):
    """``h(t) = sin(t)/t`` with ``h(0) = 1``."""
    t = np.asarray(t, dtype=float)
    return np.sinc(t / np.pi)


def ratio_H(t, beta):
    """``(1 - h(t) cos(t + 2 beta)) / (sin^2 beta + sin^2(t + beta))``."""
    t = np.asarray(t, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return (1.0 - sinc_h(t) * np.cos(t + 2 * beta)) / (np.sin(beta) ** 2 + np.sin(t + beta) ** 2)


def ratio_H_dbeta(t, beta):
    """Closed-form partial derivative of :func:`ratio_H` in ``beta``."""
    t = np.asarray(t, dtype=float)
    beta = np.asarray(beta, dtype=float)
    D = 1.0 - np.cos(t) * np.cos(t + 2 * beta)
    return 2.0 * (sinc_h(t) - np.cos(t)) * np.sin(t + 2 * beta) / D ** 2


def jacobi_ratio_max(y):
    """Maximum of ``H(2y, .)`` over ``[0, pi - 2y]`` and its location.

    Returns ``((1 + h(2y)) / (1 + cos 2y), pi/2 - y)``.
    """
    y_arr = np.asarray(y, dtype=float)
    if np.any((y_arr <= 0) | (y_arr >= np.pi / 2)):
        raise DomainError("jacobi_ratio_max needs 0 < y < pi/2")
    value = (1.0 + sinc_h(2 * y_arr)) / (1.0 + np.cos(2 * y_arr))
    arg = np.pi / 2 - y_arr
    if np.ndim(y) == 0:
        return float(value), float(arg)
    return value, arg


# --- tangential / orthogonal splitting -------------------------------------

def endpoint_velocities(m, x, y):
    """Velocities of the connecting geodesic at ``t = 0`` and ``t = 1``."""
    v0 = geo.geodesic_connect(m, x, y)
    if m.kind == "flat":
        return v0, v0.copy()
    if m.kind == "sphere":
        # closed form: velocity at the end is minus the log map back to x
        return v0, -geo.geodesic_connect(m, y, x)
    _, v1 = geo.geodesic(m, x, v0, 1.0, return_velocity=True)
    return v0, v1


def split_components(m, x, y, u0, u1):
    """Tangential and orthogonal parts of ``u = (u0, u1)`` along the geodesic ``x -> y``.

    Returns ``((v0, v1), (w0, w1))`` with ``v_t`` the Riemannian projection of
    ``u_t`` on the geodesic velocity at the corresponding end.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(geo.distance(m, x, y) <= 0):
        raise DomainError("tangential split needs distinct endpoints")
    e0, e1 = endpoint_velocities(m, x, y)

    def proj(p, u, e):
        num = geo.inner(m, p, u, e)
        den = geo.inner(m, p, e, e)
        return (num / den)[..., None] * e

    v0 = proj(x, np.asarray(u0, dtype=float), e0)
    v1 = proj(y, np.asarray(u1, dtype=float), e1)
    return (v0, v1), (u0 - v0, u1 - v1)
