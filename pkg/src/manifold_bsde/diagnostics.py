"""Numerical certificates for the uniqueness argument and its counterexample.

Covers the submartingale sum of a gauge along pairs of solutions, the
discounted process ``S = exp(A) psi(X, X')``, the integrability test
functions, Ito residuals, the uniqueness gap and the equatorial
nonuniqueness construction on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bsde
from . import forward_sde as fsde
from . import gauges as gg
from . import geometry as geo
from .errors import DomainError
from .regression import Regression, polynomial_design
from .report import EstimateReport, margin_report

LAMBDA_GRID = (0.0,) + tuple(float(2 ** k) for k in range(11))
LQ_EXPONENTS = (1.1, 1.25, 1.5)


@dataclass
class SubmartingaleParams:
    """Discount ``A_t = lam t + mu int (|Z|_r^2 + |Z'|_r^2) ds`` for the gauge ``psi``."""

    lam: float
    mu: float
    gauge: gg.GaugeFunction
    e_factor: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise DomainError("lambda and mu must be nonnegative")


def ball_params(m, e=1.5, lam=0.0, a=None):
    """Sin-power gauge with ``a`` from ``e`` and ``mu = e K / 4``."""
    a = gg.default_exponent(e) if a is None else a
    g = gg.sin_power(m, a)
    return SubmartingaleParams(lam, e * g.curvature / 4.0, g, e)


@dataclass
class PairState:
    """Batch of states ``(b, x, x', z, z')``; frames have shape (..., n, d_w)."""

    b: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z2: np.ndarray


def regular_ball_check(rho, K, cut_locus_ok=True) -> bool:
    """Regular geodesic ball test ``rho sqrt(K) < pi/2`` plus the cut-locus flag."""
    if rho <= 0 or K < 0:
        raise DomainError("need rho > 0 and K >= 0")
    return bool(rho * np.sqrt(K) < np.pi / 2 and cut_locus_ok)


# --- submartingale sum ---------------------------------------------------------

def _sum_parts(p: SubmartingaleParams, m, d: bsde.DriftSpec, s: PairState):
    """Return ``(base, psi)`` with the sum equal to ``base + lam * psi``."""
    g = p.gauge
    x, y = np.asarray(s.x, dtype=float), np.asarray(s.y, dtype=float)
    z, z2 = np.asarray(s.z, dtype=float), np.asarray(s.z2, dtype=float)
    psi = gg.gauge_value(g, x, y)
    hess = np.zeros_like(psi)
    for w in range(z.shape[-1]):
        u = np.concatenate([z[..., w], z2[..., w]], axis=-1)
        hess = hess + gg.gauge_hessian(g, m, x, y, u)
    grad = gg.gauge_gradient(g, x, y)
    ff = np.concatenate([d(s.b, x, z), d(s.b, y, z2)], axis=-1)
    drift = np.einsum("...a,...a->...", grad, ff)
    znorm = geo.frame_norm(m, x, z) ** 2 + geo.frame_norm(m, y, z2) ** 2
    return 0.5 * hess + drift + p.mu * znorm * psi, psi


def submartingale_sum(p: SubmartingaleParams, m, d: bsde.DriftSpec, s: PairState) -> np.ndarray:
    """Drift of ``exp(A) psi(X, X')`` divided by ``exp(A)`` at the given states."""
    base, psi = _sum_parts(p, m, d, s)
    return base + p.lam * psi


def sample_pair_states(m, center, radius, count, rng, dim_b=1, dim_w=2, min_distance=0.01,
                       near_fraction=0.5, z_scale=1.0):
    """Random pair states in a geodesic ball, half of them with ``z'`` close to the transport of ``z``."""
    x = _ball_points(m, center, radius, count, rng)
    y = _ball_points(m, center, radius, count, rng)
    d = geo.distance(m, x, y)
    # redraw pairs too close to the diagonal for non-smooth gauges
    for _ in range(50):
        close = d < min_distance
        if not np.any(close):
            break
        y[close] = _ball_points(m, center, radius, int(close.sum()), rng)
        d = geo.distance(m, x, y)
    n = m.dim
    E_x = _orthonormal(m, x)
    E_y = _orthonormal(m, y)
    cz = rng.standard_normal((count, n, dim_w)) * z_scale * rng.uniform(0, 1, size=(count, 1, 1))
    cz2 = rng.standard_normal((count, n, dim_w)) * z_scale * rng.uniform(0, 1, size=(count, 1, 1))
    z = np.einsum("pij,pjw->piw", E_x, cz)
    z2 = np.einsum("pij,pjw->piw", E_y, cz2)
    near = rng.uniform(size=count) < near_fraction
    if np.any(near):
        transport = geo.sphere_transport if m.kind == "sphere" else geo.parallel_transport
        pz = transport(m, x[near], y[near], z[near])
        z2[near] = pz + 0.05 * z2[near]
    b = rng.standard_normal((count, dim_b))
    return PairState(b, x, y, z, z2)


def _orthonormal(m, x):
    g = geo.metric_at(m, x)
    diag = np.sqrt(np.einsum("...ii->...i", g))
    return np.einsum("...i,ij->...ij", 1.0 / diag, np.eye(m.dim))


def _ball_points(m, center, radius, count, rng):
    if m.kind == "flat":
        return geo.sample_ball(m, center, radius, count, rng)
    pts = []
    got = 0
    while got < count:
        c = geo.sample_ball(m, center, radius, 2 * count, rng)
        c = c[m.contains(c)]
        pts.append(c)
        got += len(c)
    return np.concatenate(pts)[:count]


def calibrate_lambda(p: SubmartingaleParams, m, d, states: PairState, tol=1e-6, grid=LAMBDA_GRID):
    """Smallest grid value of lambda making every sampled sum ``>= -tol`` (None if none does)."""
    base, psi = _sum_parts(p, m, d, states)
    for lam in grid:
        if np.min(base + lam * psi) >= -tol:
            return lam
    return None


def submartingale_certificate(m, d: bsde.DriftSpec, center, radius, count=10_000, e=1.5,
                              seed=0, dim_b=1, dim_w=2, tol=1e-6) -> EstimateReport:
    """Calibrate lambda on one sample of pair states and certify the sum on a fresh one."""
    rng = np.random.default_rng(seed)
    p = ball_params(m, e)
    cal = sample_pair_states(m, center, radius, count, rng, dim_b, dim_w)
    lam = calibrate_lambda(p, m, d, cal, tol)
    if lam is None:
        return EstimateReport("submartingale_sum", count, float("-inf"), tol, passed=False,
                              details={"reason": "no lambda on the grid works"})
    p.lam = lam
    hold = sample_pair_states(m, center, radius, count, rng, dim_b, dim_w)
    vals = submartingale_sum(p, m, d, hold)
    return margin_report("submartingale_sum", vals, tolerance=tol,
                         sample_fields={"x": hold.x, "y": hold.y},
                         fitted_constants={"lambda": lam, "mu": p.mu, "a": p.gauge.a},
                         params={"e": e, "radius": radius, "samples": count})


# --- processes along solutions ---------------------------------------------------

def s_process(sol: bsde.BsdeSolution, sol2: bsde.BsdeSolution, p: SubmartingaleParams,
              use_forward=True):
    """``(S, A)`` on the grid with left-endpoint quadrature for ``A``.

    By default ``X`` is the forward re-simulation, which avoids the terminal
    regression bias carried by the backward iterate on its last step.
    """
    if sol.X.shape != sol2.X.shape or not np.array_equal(sol.grid, sol2.grid):
        raise DomainError("solutions must share grid and path count")
    m = sol.manifold
    X, X2 = _path_values(sol, use_forward), _path_values(sol2, use_forward)
    dt = np.diff(sol.grid)
    zn = geo.frame_norm(m, X[:, :-1], sol.Z) ** 2 + geo.frame_norm(m, X2[:, :-1], sol2.Z) ** 2
    A = np.zeros(X.shape[:2])
    A[:, 1:] = np.cumsum((p.lam + p.mu * zn) * dt, axis=1)
    psi = gg.gauge_value(p.gauge, X, X2)
    return np.exp(A) * psi, A


def _path_values(sol, use_forward):
    return sol.X_forward if use_forward and sol.X_forward is not None else sol.X


def _quantile_cells(b, live, per_axis):
    """Cell label of each live path on a product grid of marginal quantiles."""
    idx = np.flatnonzero(live)
    n, d = idx.size, b.shape[-1]
    label = np.zeros(n, dtype=np.int64)
    for j in range(d):
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(b[idx, j], kind="stable")] = np.arange(n)
        label = label * per_axis + rank * per_axis // n
    return idx, label


def _binned_increments(inc, b, live, bin_size):
    n, d = int(live.sum()), b.shape[-1]
    per_axis = max(1, int((n / bin_size) ** (1.0 / d)))
    idx, label = _quantile_cells(b, live, per_axis)
    counts = np.bincount(label)
    sums = np.bincount(label, inc[idx])
    sq = np.bincount(label, inc[idx] ** 2)
    ok = counts >= 2
    mean = sums[ok] / counts[ok]
    var = np.maximum(sq[ok] - counts[ok] * mean ** 2, 0.0) / (counts[ok] - 1)
    return mean, np.sqrt(var / counts[ok])


def conditional_increment_check(values, B, mask=None, k=3.0, method="bins", bin_size=250,
                                degree=bsde.BASIS_DEGREE, support_radius=2.0,
                                name="conditional_increments") -> EstimateReport:
    """Estimates of ``E[V_{i+1} - V_i | B_i]`` checked against ``-k`` standard errors.

    ``values`` is (P, N+1) and ``B`` is (P, N+1, d).  The default ``"bins"``
    method groups the live paths of each step into cells of about
    ``bin_size`` paths on a grid of marginal quantiles of ``B_i`` and scores
    each cell mean.  A nonnegative conditional drift has nonnegative cell
    averages, so this needs no model for the drift; it is the right choice
    for gauges that are not smooth on the diagonal, whose conditional drift
    spikes where the two processes meet.

    ``"regression"`` fits a polynomial of ``degree`` in ``B_i`` with sandwich
    standard errors and scores only paths within ``support_radius``
    standardized units of the bulk; it is sharper for smooth observables.
    """
    if method not in ("bins", "regression"):
        raise DomainError(f"unknown increment method {method!r}")
    values = np.asarray(values, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[..., None]
    P, N1 = values.shape
    margins = []
    zmin = np.inf
    excluded = 0
    for i in range(N1 - 1):
        live = np.ones(P, dtype=bool) if mask is None else np.asarray(mask)[:, i]
        if live.sum() <= 20:
            continue
        b = B[:, i]
        inc = values[:, i + 1] - values[:, i]
        if method == "bins":
            fit, se = _binned_increments(inc, b, live, bin_size)
        else:
            reg = Regression(polynomial_design(b, degree, live), live)
            fit, se = reg.fit_with_robust_error(inc)
            mean = b[live].mean(axis=0)
            sd = b[live].std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            core = live & (np.linalg.norm((b - mean) / sd, axis=-1) <= support_radius)
            excluded += int(live.sum() - core.sum())
            fit, se = fit[core], se[core]
        if fit.size == 0:
            continue
        margins.append(fit + k * se)
        zs = np.where(se > 0, fit / np.where(se > 0, se, 1.0), np.where(fit < 0, -np.inf, 0.0))
        zmin = min(zmin, float(zs.min()))
    allm = np.concatenate(margins) if margins else np.zeros(0)
    rep = margin_report(name, allm, tolerance=0.0)
    rep.details = {"min_z_score": zmin, "k": k, "method": method}
    if method == "bins":
        rep.details["bin_size"] = bin_size
    else:
        rep.details.update(support_radius=support_radius, excluded=excluded)
    return rep


def lq_norms(S, exponents=LQ_EXPONENTS):
    """Empirical ``L^q`` norms of ``S_T`` and of ``sup_t S_t``."""
    S = np.asarray(S, dtype=float)
    sup = np.max(np.abs(S), axis=1)
    return {f"q={q}": {"terminal": float(np.mean(np.abs(S[:, -1]) ** q) ** (1 / q)),
                       "sup": float(np.mean(sup ** q) ** (1 / q))} for q in exponents}


def uniqueness_gap(sol: bsde.BsdeSolution, sol2: bsde.BsdeSolution) -> float:
    """``sqrt(E sup_i d(X_i, X'_i)^2)`` over the shared paths."""
    if sol.X.shape != sol2.X.shape:
        raise DomainError("solutions must share grid and path count")
    return bsde._path_gap(sol.manifold, sol.X, sol2.X)


def ito_residual(sol: bsde.BsdeSolution, h, use_forward=True):
    """Discrete Ito-formula residual of a scalar function ``h`` along the solution.

    Compares ``h(X_N) - h(X_0)`` with the sum of the stochastic integral
    (left point), the half Hessian trace of ``Z`` and ``Dh . f``.  Pair two
    runs with :func:`scaling_exponent` to read off the decay rate in ``dt``.
    """
    m = sol.manifold
    X = _path_values(sol, use_forward)
    Z = sol.Z
    dW = sol.dW
    dt = np.diff(sol.grid)
    Bp = sol.B.paths
    total = np.zeros(X.shape[0])
    for i in range(X.shape[1] - 1):
        xa = X[:, i]
        za = Z[:, i]
        grad = geo.scalar_gradient(h, xa)
        total += np.einsum("pi,piw,pw->p", grad, za, dW[:, i])
        hs = sum(geo.covariant_hessian(m, h, xa, za[..., w]) for w in range(za.shape[-1]))
        total += 0.5 * hs * dt[i]
        total += np.einsum("pi,pi->p", grad, sol.drift(Bp[:, i], xa, za)) * dt[i]
    res = h(X[:, -1]) - h(X[:, 0]) - total
    return {"max_abs": float(np.max(np.abs(res))), "l2": float(np.sqrt(np.mean(res ** 2))),
            "dt": float(np.max(dt))}


def scaling_exponent(coarse, fine):
    """Empirical exponent ``r`` in ``l2 ~ dt^r`` from two :func:`ito_residual` results."""
    return float(np.log(coarse["l2"] / fine["l2"]) / np.log(coarse["dt"] / fine["dt"]))


# --- integrability test functions ------------------------------------------------

def _cos_euclidean_setup(m, alpha, params):
    q = np.asarray(params.get("center", np.zeros(m.dim)), dtype=float)
    mu = float(params.get("mu", alpha))
    C_r = float(params.get("C_r", 1.0))
    a = float(params.get("a", np.sqrt(2 * np.pi * C_r * mu)))
    r0 = float(params.get("r0", np.pi / (4 * a)))
    if not 0 < r0 < np.pi / (2 * a):
        raise DomainError("r0 must satisfy 0 < r0 < pi / (2 a)")

    def phi(x):
        return np.cos(a * np.linalg.norm(x - q, axis=-1))

    def sampler(count, rng):
        u = rng.standard_normal((count, m.dim))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        r = r0 * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / m.dim)
        return q + r * u

    return phi, sampler, {"a": a, "r0": r0, "mu": mu, "C_r": C_r}


def _cos_ball_setup(m, alpha, params):
    K = m.curvature_bound
    if K <= 0:
        raise DomainError("cos_ball needs positive curvature")
    beta = float(params.get("beta", 1.5))
    gamma = float(params.get("gamma", 0.5))
    if not 0 < gamma < 1 or not 1 < beta < 1 / gamma:
        raise DomainError("cos_ball needs 0 < gamma < 1 and 1 < beta < 1/gamma")
    o = np.asarray(params.get("center", [np.pi / 2, 0.0]), dtype=float)
    rho = gamma * np.pi / (2 * np.sqrt(K))

    def phi(x):
        return np.cos(beta * np.sqrt(K) * geo.distance(m, np.broadcast_to(o, x.shape), x))

    def sampler(count, rng):
        return _ball_points(m, o, rho, count, rng)

    return phi, sampler, {"beta": beta, "gamma": gamma, "rho": rho, "K": K}


def lemma_alpha(kind, m, params=None):
    """The constant ``alpha`` the corresponding lemma provides."""
    params = params or {}
    if kind == "cos_ball":
        return m.curvature_bound * float(params.get("beta", 1.5)) / 2
    return float(params.get("mu", 1.0))


def integrability_gauge_check(kind, m, alpha, params=None, samples=1000, seed=0, tol=1e-6) -> EstimateReport:
    """Sampled ``-(Hess phi <u,u> + 2 alpha phi |u|_r^2)`` for unit ``u``; passes iff ``>= -tol``."""
    params = dict(params or {})
    if kind == "cos_euclidean":
        phi, sampler, info = _cos_euclidean_setup(m, alpha, params)
    elif kind == "cos_ball":
        phi, sampler, info = _cos_ball_setup(m, alpha, params)
    else:
        raise DomainError(f"unknown integrability gauge {kind!r}")
    rng = np.random.default_rng(seed)
    x = sampler(samples, rng)
    u = geo.random_unit_vectors(m, x, rng)
    h = geo.covariant_hessian(m, phi, x, u)
    margins = -(h + 2 * alpha * phi(x))
    return margin_report(f"integrability_{kind}", margins, tolerance=tol,
                         sample_fields={"x": x, "u": u},
                         fitted_constants={"alpha": alpha, **info},
                         params={"kind": kind, "alpha": alpha, "samples": samples})


# --- equatorial counterexample ------------------------------------------------------

@dataclass
class NonuniquenessResult:
    X: np.ndarray
    X2: np.ndarray
    W: np.ndarray
    stop_index: np.ndarray
    grid: np.ndarray
    report: dict = field(default_factory=dict)


def nonuniqueness_demo(steps=1000, paths=2000, seed=0, lattice=8) -> NonuniquenessResult:
    """Two equatorial martingales on the unit sphere with the same terminal value.

    The driving walk is a symmetric Rademacher walk with increments
    ``+-pi/(2*lattice)`` (so ``dt`` is its square); it is an exact discrete
    martingale that hits ``+-pi/2`` exactly.  ``X = (pi/2, W)`` starts at
    ``(1, 0, 0)`` and ``X' = (pi/2, pi - W)`` at ``(-1, 0, 0)``; both are
    frozen when ``W`` reaches ``+-pi/2``, i.e. on the plane ``{x = 0}``.
    """
    m = geo.sphere()
    s = np.pi / (2 * lattice)
    dt = s * s
    grid = np.arange(steps + 1) * dt
    rng = np.random.Generator(np.random.Philox(key=seed))
    signs = rng.integers(0, 2, size=(paths, steps)) * 2 - 1
    k = np.zeros((paths, steps + 1), dtype=np.int64)
    np.cumsum(signs, axis=1, out=k[:, 1:])
    hit = np.abs(k) >= lattice
    stop = np.where(hit.any(axis=1), np.argmax(hit, axis=1), steps)
    idx = np.minimum(np.arange(steps + 1)[None, :], stop[:, None])
    k = np.take_along_axis(k, idx, axis=1)
    W = k * s
    X = np.stack([np.full_like(W, np.pi / 2), W], axis=-1)
    X2 = np.stack([np.full_like(W, np.pi / 2), np.pi - W], axis=-1)

    stopped = stop < steps
    pT = geo.sphere_embed(m, X[:, -1])
    p2T = geo.sphere_embed(m, X2[:, -1])
    terminal_gap = float(np.max(np.linalg.norm(pT - p2T, axis=-1)[stopped])) if stopped.any() else float("nan")
    on_plane = float(np.max(np.abs(pT[stopped, 0]))) if stopped.any() else float("nan")
    d0 = float(geo.distance(m, X[0, 0], X2[0, 0]))

    # the frame of both processes is the unit phi direction, on the equator the
    # Christoffel drift vanishes
    z = np.zeros((1, 2, 1))
    z[0, 1, 0] = 1.0
    cdrift = float(np.max(np.abs(bsde.md_drift(m, bsde.zero_drift(), np.zeros((1, 1)),
                                               X[:1, 0], z))))
    alive = np.arange(steps)[None, :] < stop[:, None]
    rep1 = _pooled_drift(X[..., 1], W, alive)
    rep2 = _pooled_drift(X2[..., 1], W, alive)
    report = {
        "distance_X0": d0,
        "distance_is_pi": bool(d0 == np.pi),
        "terminal_gap": terminal_gap,
        "terminal_on_plane": on_plane,
        "unstopped_paths": int((~stopped).sum()),
        "christoffel_drift": cdrift,
        "drift_z_X": rep1,
        "drift_z_X2": rep2,
        "drift_pass": bool(rep1 <= 3 and rep2 <= 3),
        "dt": dt,
    }
    report["pass"] = bool(report["distance_is_pi"] and report["drift_pass"]
                          and (not stopped.any() or terminal_gap < 1e-12))
    return NonuniquenessResult(X, X2, W, stop, grid, report)


def _pooled_drift(V, state, alive, degree=bsde.BASIS_DEGREE):
    """Largest |z| score of the regression drift of ``V`` given the current state, pooled over time."""
    inc = (V[:, 1:] - V[:, :-1])[alive]
    st = state[:, :-1][alive]
    if inc.size == 0:
        return 0.0
    reg = Regression(polynomial_design(st[:, None], degree))
    fit, se = reg.fit_with_error(inc)
    return float(np.max(np.abs(fit) / np.where(se > 0, se, np.inf)))


def exp_moment_of_energy(sol: bsde.BsdeSolution, sol2: bsde.BsdeSolution | None, mu):
    """``E exp(mu int (|Z|_r^2 + |Z'|_r^2) dt)`` by left-point quadrature."""
    m = sol.manifold
    dt = np.diff(sol.grid)
    energy = np.sum(geo.frame_norm(m, sol.X[:, :-1], sol.Z) ** 2 * dt, axis=1)
    if sol2 is not None:
        energy = energy + np.sum(geo.frame_norm(m, sol2.X[:, :-1], sol2.Z) ** 2 * dt, axis=1)
    return fsde.exp_moment(energy, mu)
