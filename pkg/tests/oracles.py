"""Independent reference computations shared by the tests."""

import numpy as np

from manifold_bsde import gauges as gg


def embed(x):
    th, ph = x[..., 0], x[..., 1]
    return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)


def chart_vector_to_embedded(x, v):
    th, ph = x[..., 0], x[..., 1]
    e_th = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=-1)
    e_ph = np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)], axis=-1)
    return v[..., :1] * e_th + v[..., 1:2] * e_ph


def unembed(p, phi_ref):
    th = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
    ph = np.arctan2(p[..., 1], p[..., 0])
    ph = ph + 2 * np.pi * np.round((phi_ref - ph) / (2 * np.pi))
    return np.stack([th, ph], axis=-1)


def sphere_exp(x, v):
    """Great circle through ``x`` with chart velocity ``v``, evaluated at time one."""
    p = embed(x)
    w = chart_vector_to_embedded(x, v)
    s = np.linalg.norm(w, axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    q = np.cos(s) * p + np.sin(s) * w / safe
    return unembed(q, x[..., 1])


def product_path(kind, x, y, u, t):
    n = x.shape[-1]
    if kind == "flat":
        return x + t * u[..., :n], y + t * u[..., n:]
    return sphere_exp(x, t * u[..., :n]), sphere_exp(y, t * u[..., n:])


def geodesic_second_derivative(g, kind, x, y, u, h=2e-3):
    """``d^2/dt^2 psi(gamma(t))`` at 0 for the product geodesic with velocity ``u``.

    Central second differences at ``h`` and ``h/2`` combined by Richardson.
    """
    def f(t):
        a, b = product_path(kind, x, y, u, t)
        return gg.gauge_value(g, a, b)

    f0 = f(0.0)

    def d2(s):
        return (f(s) - 2 * f0 + f(-s)) / s ** 2

    return (4 * d2(h / 2) - d2(h)) / 3


def grid_max_H(y, points=100_000):
    """Grid maximization of ``H(2y, beta)`` over ``beta`` in ``[0, pi - 2y]``."""
    t = 2.0 * y
    beta = np.linspace(0.0, np.pi - t, points)
    h = np.sin(t) / t
    H = (1.0 - h * np.cos(t + 2 * beta)) / (np.sin(beta) ** 2 + np.sin(t + beta) ** 2)
    k = int(np.argmax(H))
    return float(H[k]), float(beta[k])
