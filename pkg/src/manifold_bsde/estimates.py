"""Registry of sampled certificates for the geometric inequalities.

Each entry samples configurations ``(x, x', u)``, evaluates both sides of
one inequality and returns an :class:`EstimateReport` whose margins are
``lhs - rhs`` for lower bounds (``rhs - lhs`` for upper bounds, ``-|lhs - rhs|``
for identities).  When the inequality only asserts that some constant exists,
the constant is fitted on a calibration half of the sample, inflated by
``SAFETY`` and checked on the holdout half.
"""

from __future__ import annotations

import numpy as np

from . import gauges as gg
from . import geometry as geo
from .errors import DomainError, RegistryError
from .report import margin_report

SAFETY = 1.5
DERIV_STEP = 1e-3
SPHERE_CENTER = np.array([np.pi / 2, 0.0])


def _setup(m, params):
    if m is None:
        m = geo.sphere()
    center = params.get("center")
    if center is None:
        center = SPHERE_CENTER if m.kind == "sphere" else np.zeros(m.dim)
    return m, np.asarray(center, dtype=float)


def _sqrtK(m):
    return float(np.sqrt(m.curvature_bound))


def _pairs(m, rng, count, center, params, dist_range):
    region = params.get("region_radius", 0.5 if m.kind == "sphere" else 1.0)
    dr = tuple(params.get("dist_range", dist_range))
    return geo.sample_pairs(m, rng, count, center, region, dr)


def _product_vectors(m, rng, x, y):
    """Random product tangent vectors with Riemannian-unit-ball sized factors."""
    u0 = geo.random_unit_vectors(m, x, rng) * rng.uniform(0.1, 1.0, size=(len(x), 1))
    u1 = geo.random_unit_vectors(m, y, rng) * rng.uniform(0.1, 1.0, size=(len(y), 1))
    return u0, u1


def distance_derivative(m, x, y, u0, u1, h=DERIV_STEP):
    """``d/dt d(x + t u0, y + t u1)`` at ``t = 0`` by Richardson-extrapolated central differences."""
    def central(hh):
        return (geo.distance(m, x + hh * u0, y + hh * u1)
                - geo.distance(m, x - hh * u0, y - hh * u1)) / (2 * hh)

    return (4.0 * central(h / 2) - central(h)) / 3.0


def _split(m, x, y, u0, u1):
    (v0, v1), (w0, w1) = gg.split_components(m, x, y, u0, u1)
    return v0, v1, w0, w1


def _transport(m, x, y, z):
    return geo.parallel_transport(m, x, y, z)


def _sq(m, p, v):
    return geo.riemannian_norm(m, p, v) ** 2


def _halves(count):
    cal = np.arange(count) % 2 == 0
    return cal, ~cal


# --- individual certificates ---------------------------------------------------

def _est_2der1(m, g, count, params, rng):
    m, center = _setup(m, params)
    x, y = _pairs(m, rng, count, center, params, (0.05, 2.5))
    u0, u1 = _product_vectors(m, rng, x, y)
    v0, v1, _, _ = _split(m, x, y, u0, u1)
    lhs = np.abs(distance_derivative(m, x, y, u0, u1))
    rhs = geo.riemannian_norm(m, y, _transport(m, x, y, v0) - v1)
    diff = np.abs(lhs - rhs)
    return margin_report("2der1", -diff, sample_fields={"x": x, "y": y, "u0": u0, "u1": u1},
                         details={"max_abs_difference": float(diff.max())})


def _hess_distance(m, x, y, u0, u1):
    return gg.gauge_hessian(gg.distance_gauge(m), m, x, y, np.concatenate([u0, u1], axis=-1))


def _est_derkpos(m, g, count, params, rng):
    m, center = _setup(m, params)
    K = m.curvature_bound
    hi = 2.5 if K > 0 else 2.0
    x, y = _pairs(m, rng, count, center, params, (0.05, min(hi, 0.95 * np.pi / np.sqrt(K)) if K else hi))
    u0, u1 = _product_vectors(m, rng, x, y)
    _, _, w0, w1 = _split(m, x, y, u0, u1)
    d = geo.distance(m, x, y)
    lhs = _hess_distance(m, x, y, u0, u1)
    t = np.sqrt(K) * d
    ratio = (1 + gg.sinc_h(t)) / (1 + np.cos(t))
    w2 = _sq(m, x, w0) + _sq(m, y, w1)
    rhs = _sq(m, y, _transport(m, x, y, w0) - w1) / d - 0.5 * K * d * ratio * w2
    return margin_report("derkpos", lhs - rhs, sample_fields={"x": x, "y": y, "u0": u0, "u1": u1})


def _sin_power_gauge(m, g, params):
    if g is not None and g.kind == "sin_power":
        return g
    a = params.get("a", gg.default_exponent(params.get("e", 1.5)))
    return gg.sin_power(m, a)


def neighbourhood_radius(a, beta, K, grid=20000):
    """Largest ``delta`` for which every defining condition of ``V_beta`` holds on ``(0, delta]``."""
    y = np.linspace(1e-6, np.pi / 2 - 1e-6, grid)
    c1 = (a - 1) * np.cos(y) ** 2 - np.sin(y) ** 2 >= (a - 1) / 2
    c2 = np.cos(y) * np.sin(y) / y >= 0.5
    c3 = y / np.tan(y) * (1 + gg.sinc_h(2 * y)) / (1 + np.cos(2 * y)) <= beta
    ok = c1 & c2 & c3
    bad = np.flatnonzero(~ok)
    ymax = y[bad[0] - 1] if bad.size else y[-1]
    return 2.0 * ymax / np.sqrt(K)


def _est_estimhess1(m, g, count, params, rng):
    m, center = _setup(m, params)
    g = _sin_power_gauge(m, g, params)
    a, K = g.a, g.curvature
    beta = float(params.get("beta", 1.5))
    if beta <= 1:
        raise DomainError("beta must exceed 1")
    alpha = K * a * (a - 1) / 8.0
    rad = neighbourhood_radius(a, beta, K)
    x, y = _pairs(m, rng, count, center, params, (0.01, 0.999 * rad))
    u0, u1 = _product_vectors(m, rng, x, y)
    _, _, w0, w1 = _split(m, x, y, u0, u1)
    d = geo.distance(m, x, y)
    yy = np.sqrt(K) * d / 2
    lhs = gg.gauge_hessian(g, m, x, y, np.concatenate([u0, u1], axis=-1))
    psi = gg.gauge_value(g, x, y)
    w2 = _sq(m, x, w0) + _sq(m, y, w1)
    rhs = (alpha * np.sin(yy) ** (a - 2) * _sq(m, y, _transport(m, x, y, u0) - u1)
           - a * beta * K / 2 * psi * w2)
    return margin_report("estimhess1", lhs - rhs, sample_fields={"x": x, "y": y, "u0": u0, "u1": u1},
                         fitted_constants={"alpha": alpha, "V_beta_radius": rad},
                         params={"a": a, "beta": beta, "K": K})


def _est_estimhess2(m, g, count, params, rng):
    m, center = _setup(m, params)
    g = _sin_power_gauge(m, g, params)
    a, K = g.a, g.curvature
    lim = np.pi / np.sqrt(K)
    x, y = _pairs(m, rng, count, center, params, (0.1 / np.sqrt(K), lim - 0.1 / np.sqrt(K)))
    u0, u1 = _product_vectors(m, rng, x, y)
    lhs = gg.gauge_hessian(g, m, x, y, np.concatenate([u0, u1], axis=-1))
    psi = gg.gauge_value(g, x, y)
    rhs = -a * K / 2 * psi * (_sq(m, x, u0) + _sq(m, y, u1))
    return margin_report("estimhess2", lhs - rhs, sample_fields={"x": x, "y": y, "u0": u0, "u1": u1},
                         params={"a": a, "K": K})


def _emery_gauge(g, params, center):
    if g is not None:
        return g
    return gg.emery(params.get("eps", 0.1), center=center)


def _est_minA(m, g, count, params, rng):
    m = geo.flat(2) if m is None else m
    m, center = _setup(m, params)
    g = _emery_gauge(g, params, center)
    x, y = _pairs(m, rng, count, center, {"region_radius": params.get("region_radius", 0.1)},
                  params.get("dist_range", (0.0, 0.05)))
    blocks = gg.hessian_blocks(g, m, x, y)
    d = geo.distance(m, x, y)
    p = g.order
    scale = np.where(d > 0, d, 1.0) ** (p - 2) if p != 2 else np.ones_like(d)
    lam = np.linalg.eigvalsh(0.5 * (blocks.A_tilde + np.swapaxes(blocks.A_tilde, -1, -2)))[..., 0]
    eta_emp = float(np.min(lam / scale))
    target = g.eps ** 2 / 2 if g.kind == "emery" else float(params.get("eta", 0.0))
    return margin_report("minA", lam - target * scale, sample_fields={"x": x, "y": y},
                         fitted_constants={"eta": eta_emp, "eta_required": target},
                         params={"eps": g.eps})


def _inv_sqrt_spd(M):
    w, V = np.linalg.eigh(M)
    return np.einsum("...ij,...j,...kj->...ik", V, 1.0 / np.sqrt(w), V)


def _est_minhesspsi(m, g, count, params, rng):
    """Worst case over all directions at each sampled pair via a generalized eigenproblem.

    With ``G`` the form ``|P z - z'|_r^2`` and ``Gm`` the product metric, the
    smallest admissible ``beta`` at a pair is the top eigenvalue of
    ``(alpha d^(p-2) G - Hess) / psi`` relative to ``Gm``.
    """
    m = geo.flat(2) if m is None else m
    m, center = _setup(m, params)
    g = _emery_gauge(g, params, center)
    x, y = _pairs(m, rng, count, center, {"region_radius": params.get("region_radius", 0.1)},
                  params.get("dist_range", (0.001, 0.1)))
    n = m.dim
    H = gg.hessian_matrix(g, m, x, y)
    Pm = _transport(m, x, y, np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)))
    L = np.concatenate([Pm, -np.broadcast_to(np.eye(n), Pm.shape)], axis=-1)
    gy = geo.metric_at(m, y)
    G = np.einsum("...ai,...ab,...bj->...ij", L, gy, L)
    Gm = np.zeros_like(H)
    Gm[..., :n, :n] = geo.metric_at(m, x)
    Gm[..., n:, n:] = gy
    S = _inv_sqrt_spd(Gm)
    d = geo.distance(m, x, y)
    p = g.order
    psi = gg.gauge_value(g, x, y)
    cal, hold = _halves(len(x))
    A = gg.hessian_blocks(g, m, x[cal], y[cal]).A_tilde
    lam = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))[..., 0]
    alpha = max(float(np.min(lam / d[cal] ** (p - 2))), 0.0) / 2

    def sandwich(M, mask):
        M = np.einsum("...ij,...jk,...kl->...il", S[mask], M, S[mask])
        return 0.5 * (M + np.swapaxes(M, -1, -2))

    scaled_G = (alpha * d ** (p - 2))[:, None, None] * G
    need = np.linalg.eigvalsh(sandwich(scaled_G[cal] - H[cal], cal))[..., -1] / psi[cal]
    beta = max(float(np.max(need)), 0.0) * SAFETY
    margins = np.linalg.eigvalsh(sandwich(H[hold] - scaled_G[hold]
                                          + (beta * psi[hold])[:, None, None] * Gm[hold], hold))[..., 0]
    return margin_report("minhesspsi", margins, sample_fields={"x": x[hold], "y": y[hold]},
                         fitted_constants={"alpha": alpha, "beta": beta, "radius": float(d.max())})


def _ball_in_chart(m, o, rad, count, rng, min_radius):
    pts = []
    got = 0
    for _ in range(100):
        cand = geo.sample_ball(m, o, rad, 2 * count, rng, min_radius=min_radius)
        cand = cand[m.contains(cand, pad=-0.02)]
        pts.append(cand)
        got += len(cand)
        if got >= count:
            break
    out = np.concatenate(pts)[:count]
    if len(out) < count:
        raise DomainError("could not sample enough points inside the chart")
    return out


def _est_minhessdelta(m, g, count, params, rng):
    m, center = _setup(m, params)
    K = m.curvature_bound
    hi = 0.5 * np.pi / np.sqrt(K) - 0.05 if K > 0 else 1.0
    rad = params.get("max_distance", hi)
    o = center
    xs = _ball_in_chart(m, o, rad, count, rng, params.get("min_distance", 0.05))
    os_ = np.broadcast_to(o, xs.shape).copy()
    u = geo.random_unit_vectors(m, xs, rng) * rng.uniform(0.1, 1.0, size=(count, 1))
    d = geo.distance(m, os_, xs)
    lhs = _hess_distance(m, os_, xs, np.zeros_like(u), u)
    _, _, _, w = _split(m, os_, xs, np.zeros_like(u), u)
    sk = np.sqrt(K)
    coef = sk / np.tan(sk * d) if K > 0 else 1.0 / d
    rhs = coef * _sq(m, xs, w)
    return margin_report("minhessdelta", lhs - rhs, sample_fields={"x": xs, "u": u},
                         params={"K": K, "center": o})


def _est_2tp2(m, g, count, params, rng):
    m, center = _setup(m, params)
    x, y = _pairs(m, rng, count, center, params, (0.0, 0.5))
    z = rng.standard_normal(x.shape)
    z2 = np.where(rng.uniform(size=(len(x), 1)) < 0.5, z + 0.1 * rng.standard_normal(x.shape),
                  rng.standard_normal(x.shape))
    cal, hold = _halves(len(x))
    fit = geo.transport_comparison_margin(m, x[cal], y[cal], z[cal], z2[cal])
    C = max(fit.fitted_constants["C_tp2"], fit.fitted_constants["C_tp3"]) * SAFETY
    pz = _transport(m, x[hold], y[hold], z[hold])
    d = geo.distance(m, x[hold], y[hold])
    lhs = np.linalg.norm(z[hold] - z2[hold], axis=-1)
    rhs = C * (geo.riemannian_norm(m, y[hold], pz - z2[hold])
               + d * (geo.riemannian_norm(m, x[hold], z[hold]) + geo.riemannian_norm(m, y[hold], z2[hold])))
    tp3 = C * d * np.linalg.norm(z[hold], axis=-1) - np.linalg.norm(pz - z[hold], axis=-1)
    return margin_report("2tp2", np.minimum(rhs - lhs, tp3),
                         sample_fields={"x": x[hold], "y": y[hold], "z": z[hold]},
                         fitted_constants={"C": C, "C_tp2": fit.fitted_constants["C_tp2"],
                                           "C_tp3": fit.fitted_constants["C_tp3"]})


def default_test_drift(n, dim_w):
    """Smooth Lipschitz drift used when a certificate needs some ``f``."""
    def f(b, x, z):
        return 0.5 * np.tanh(b[..., :1]) + 0.3 * np.sin(x) + 0.2 * z.sum(axis=-1)

    return f


def _est_2majdpsi(m, g, count, params, rng):
    m, center = _setup(m, params)
    if g is None:
        g = gg.emery(params.get("eps", 0.1), center=center) if m.kind == "flat" else gg.distance_squared(m)
    dim_w = int(params.get("dim_w", 2))
    f = params.get("drift") or default_test_drift(m.dim, dim_w)
    x, y = _pairs(m, rng, count, center, params, (0.01, 0.5))
    b = rng.standard_normal((len(x), 1))
    z = rng.standard_normal((len(x), m.dim, dim_w))
    z2 = np.where(rng.uniform(size=(len(x), 1, 1)) < 0.5, z + 0.05 * rng.standard_normal(z.shape),
                  rng.standard_normal(z.shape))
    grad = gg.gauge_gradient(g, x, y)
    lhs = np.abs(np.einsum("pa,pa->p", grad, np.concatenate([f(b, x, z), f(b, y, z2)], axis=-1)))
    d = geo.distance(m, x, y)
    nz = np.linalg.norm(z, axis=(-2, -1))
    nz2 = np.linalg.norm(z2, axis=(-2, -1))
    base = d ** (g.order - 1) * (d * (1 + nz + nz2) + np.linalg.norm(z - z2, axis=(-2, -1)))
    cal, hold = _halves(len(x))
    C = float(np.max(lhs[cal] / base[cal])) * SAFETY
    return margin_report("2majdpsi", C * base[hold] - lhs[hold],
                         sample_fields={"x": x[hold], "y": y[hold]},
                         fitted_constants={"C": C})


REGISTRY = {
    "2der1": _est_2der1,
    "derkpos": _est_derkpos,
    "estimhess1": _est_estimhess1,
    "estimhess2": _est_estimhess2,
    "minA": _est_minA,
    "minhesspsi": _est_minhesspsi,
    "minhessdelta": _est_minhessdelta,
    "2tp2": _est_2tp2,
    "2majdpsi": _est_2majdpsi,
}


def verify_estimate(name, m=None, g=None, sample_count=500, params=None, seed=0):
    """Sample and certify the named inequality; see :data:`REGISTRY` for names."""
    try:
        fn = REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown estimate {name!r}; known: {sorted(REGISTRY)}") from None
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    rep = fn(m, g, int(sample_count), params, rng)
    rep.name = name
    rep.params = {**{k: v for k, v in params.items() if not callable(v)}, **rep.params,
                  "sample_count": int(sample_count), "seed": seed}
    return rep
