"""Euler-Maruyama simulation of the driving diffusion and its Brownian motion.

Noise is reproducible path by path: path ``p`` draws its Gaussian increments
from a Philox counter-based stream keyed by ``seed`` whose counter starts at
``p`` in the top word.  An ensemble therefore does not depend on how many
paths are simulated alongside, on chunking, or on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericalError

LOG_FLOAT_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """``dB = b(B) dt + sigma(B) dW`` started at ``start_y``.

    ``drift_b`` maps (P, d) -> (P, d) and ``vol_sigma`` maps (P, d) -> (P, d, d_w).
    """

    drift_b: Callable[[np.ndarray], np.ndarray]
    vol_sigma: Callable[[np.ndarray], np.ndarray]
    start_y: np.ndarray
    dim_w: int

    @property
    def dim_d(self):
        return int(np.asarray(self.start_y).size)

    def started_at(self, y):
        return DiffusionSpec(self.drift_b, self.vol_sigma, np.asarray(y, dtype=float), self.dim_w)


def brownian(dim, start=None, dim_w=None):
    """Standard Brownian motion in R^dim (``b = 0``, ``sigma = I``)."""
    dim_w = dim if dim_w is None else dim_w
    start = np.zeros(dim) if start is None else np.asarray(start, dtype=float)
    eye = np.eye(dim, dim_w)

    def b(x):
        return np.zeros_like(x)

    def s(x):
        return np.broadcast_to(eye, x.shape[:-1] + eye.shape)

    return DiffusionSpec(b, s, start, dim_w)


def constant_coefficients(drift, vol, start):
    """Diffusion with constant drift vector and constant volatility matrix."""
    drift = np.atleast_1d(np.asarray(drift, dtype=float))
    vol = np.atleast_2d(np.asarray(vol, dtype=float))
    if vol.shape[0] != drift.size:
        raise DomainError("volatility rows must match the drift dimension")

    def b(x):
        return np.broadcast_to(drift, x.shape).copy()

    def s(x):
        return np.broadcast_to(vol, x.shape[:-1] + vol.shape)

    return DiffusionSpec(b, s, np.asarray(start, dtype=float), vol.shape[1])


def linear_drift(rate, vol, start):
    """Ornstein-Uhlenbeck type diffusion ``dB = -rate B dt + vol dW``."""
    vol = np.atleast_2d(np.asarray(vol, dtype=float))

    def b(x):
        return -rate * x

    def s(x):
        return np.broadcast_to(vol, x.shape[:-1] + vol.shape)

    return DiffusionSpec(b, s, np.asarray(start, dtype=float), vol.shape[1])


@dataclass
class PathEnsemble:
    """``paths`` has shape (P, N+1, dim); ``increments`` (P, N, d_w) when stored."""

    grid: np.ndarray
    paths: np.ndarray
    increments: np.ndarray | None = None

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def n_steps(self):
        return self.grid.size - 1


def uniform_grid(T, steps):
    if steps < 1 or T <= 0:
        raise DomainError("grid needs T > 0 and at least one step")
    return np.linspace(0.0, float(T), int(steps) + 1)


def check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must start at 0 and be strictly increasing")
    return grid


def default_workers():
    try:
        return max(1, int(os.environ.get("MANIFOLD_BSDE_WORKERS", "1")))
    except ValueError:
        return 1


class NoiseStreams:
    """Per-path standard normal streams; each path advances independently."""

    def __init__(self, seed, dim_w):
        self.seed = int(seed)
        self.dim_w = int(dim_w)
        self._gens = {}

    def _gen(self, p):
        g = self._gens.get(p)
        if g is None:
            g = np.random.Generator(np.random.Philox(key=self.seed, counter=[0, 0, 0, int(p)]))
            self._gens[p] = g
        return g

    def draw(self, paths, steps, workers=1):
        """Next ``steps`` standard normal vectors for each path index, (len, steps, d_w)."""
        paths = np.asarray(paths, dtype=np.int64)
        out = np.empty((paths.size, steps, self.dim_w))
        gens = [self._gen(p) for p in paths.tolist()]

        def fill(lo, hi):
            for k in range(lo, hi):
                out[k] = gens[k].standard_normal((steps, self.dim_w))

        if workers <= 1 or paths.size < 2 * workers:
            fill(0, paths.size)
        else:
            cuts = np.linspace(0, paths.size, workers + 1).astype(int)
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(lambda ab: fill(*ab), zip(cuts[:-1], cuts[1:])))
        return out

    def forget(self, paths):
        for p in np.asarray(paths).tolist():
            self._gens.pop(p, None)


def brownian_increments(seed, n_paths, grid, dim_w, workers=1, first_path=0):
    """Brownian increments ``dW`` of shape (P, N, d_w) on the given grid."""
    grid = check_grid(grid)
    dt = np.diff(grid)
    noise = NoiseStreams(seed, dim_w).draw(np.arange(first_path, first_path + n_paths), dt.size, workers)
    return noise * np.sqrt(dt)[None, :, None]


def euler_maruyama(spec: DiffusionSpec, grid, dW, start=None):
    """Euler-Maruyama paths driven by given increments ``dW`` (P, N, d_w)."""
    grid = check_grid(grid)
    dt = np.diff(grid)
    P = dW.shape[0]
    y0 = spec.start_y if start is None else start
    B = np.empty((P, grid.size, spec.dim_d))
    B[:, 0] = y0
    for i in range(dt.size):
        cur = B[:, i]
        step = spec.drift_b(cur) * dt[i] + np.einsum("pdw,pw->pd", spec.vol_sigma(cur), dW[:, i])
        nxt = cur + step
        bad = ~np.all(np.isfinite(nxt), axis=-1)
        if np.any(bad):
            raise NumericalError(f"non-finite diffusion value at step {i} on path {int(np.argmax(bad))}")
        B[:, i + 1] = nxt
    return B


def simulate_diffusion(spec: DiffusionSpec, grid, n_paths, seed, workers=None):
    """Simulate ``(B, W)`` ensembles on ``grid`` with ``n_paths`` paths."""
    if n_paths < 1:
        raise DomainError("need at least one path")
    grid = check_grid(grid)
    workers = default_workers() if workers is None else workers
    dW = brownian_increments(seed, n_paths, grid, spec.dim_w, workers)
    W = np.zeros((n_paths, grid.size, spec.dim_w))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    B = euler_maruyama(spec, grid, dW)
    return PathEnsemble(grid, B, dW), PathEnsemble(grid, W, dW)


def hitting_time(ensemble: PathEnsemble, inside: Callable[[np.ndarray], np.ndarray]):
    """First grid index at which each path lies outside the domain (``N`` if never)."""
    paths = ensemble.paths
    ins = np.asarray(inside(paths), dtype=bool)
    out = ~ins
    first = np.argmax(out, axis=1)
    return np.where(out.any(axis=1), first, paths.shape[1] - 1)


def simulate_exit_indices(spec: DiffusionSpec, grid, n_paths, seed, inside, chunk=1024, workers=None):
    """Stream the diffusion path by path until exit; returns ``(index, exited, exit_point)``.

    Uses the same noise as :func:`simulate_diffusion` without storing the
    ensemble, so large horizons and path counts fit in memory.
    """
    grid = check_grid(grid)
    workers = default_workers() if workers is None else workers
    dt = np.diff(grid)
    N = dt.size
    noise = NoiseStreams(seed, spec.dim_w)
    idx = np.full(n_paths, N, dtype=np.int64)
    exited = np.zeros(n_paths, dtype=bool)
    start = np.broadcast_to(np.asarray(spec.start_y, dtype=float), (n_paths, spec.dim_d))
    pos = start.copy()
    initially_out = ~np.asarray(inside(pos), dtype=bool)
    idx[initially_out] = 0
    exited[initially_out] = True
    alive = np.flatnonzero(~initially_out)
    i0 = 0
    while alive.size and i0 < N:
        steps = min(chunk, N - i0)
        xi = noise.draw(alive, steps, workers) * np.sqrt(dt[i0:i0 + steps])[None, :, None]
        cur = pos[alive]
        live = np.ones(alive.size, dtype=bool)
        for s in range(steps):
            act = np.flatnonzero(live)
            if act.size == 0:
                break
            c = cur[act]
            nxt = c + spec.drift_b(c) * dt[i0 + s] + np.einsum("pdw,pw->pd", spec.vol_sigma(c), xi[act, s])
            if not np.all(np.isfinite(nxt)):
                raise NumericalError(f"non-finite diffusion value at step {i0 + s}")
            cur[act] = nxt
            out = ~np.asarray(inside(nxt), dtype=bool)
            if np.any(out):
                hit = alive[act[out]]
                idx[hit] = i0 + s + 1
                exited[hit] = True
                live[act[out]] = False
        pos[alive] = cur
        noise.forget(alive[~live])
        alive = alive[live]
        i0 += steps
    return idx, exited, pos


@dataclass
class ExpMoment:
    """Monte-Carlo estimate of ``E exp(xi * value)``."""

    estimate: float
    std_error: float
    overflow: bool
    n: int
    xi: float

    def as_dict(self):
        return {"estimate": self.estimate, "std_error": self.std_error,
                "overflow": self.overflow, "n": self.n, "xi": self.xi}


def exp_moment(values, xi) -> ExpMoment:
    """Mean of ``exp(xi * values)`` with its standard error.

    Any term that would overflow double precision makes the estimate
    ``+inf`` with ``overflow=True``.
    """
    if xi < 0:
        raise DomainError("xi must be nonnegative")
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if xi == 0:
        return ExpMoment(1.0, 0.0, False, n, 0.0)
    expo = xi * v
    if np.any(expo > LOG_FLOAT_MAX - np.log(max(n, 1))):
        return ExpMoment(float("inf"), float("inf"), True, n, float(xi))
    e = np.exp(expo)
    se = float(e.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ExpMoment(float(e.mean()), se, False, n, float(xi))


def increment_normality(dW, grid, k=4.0):
    """Marginal check of Brownian increments pooled over paths, steps and components.

    Increments are scaled by ``1/sqrt(dt)``; the sample mean must be within
    ``k`` standard errors of 0 and the sample variance within ``k`` standard
    errors of 1.
    """
    dt = np.diff(check_grid(grid))
    xi = (np.asarray(dW, dtype=float) / np.sqrt(dt)[None, :, None]).ravel()
    n = xi.size
    mean = float(xi.mean())
    var = float(xi.var(ddof=1))
    se_mean = 1.0 / np.sqrt(n)
    se_var = np.sqrt(2.0 / (n - 1))
    return {"mean": mean, "variance": var, "mean_z": mean / se_mean,
            "variance_z": (var - 1.0) / se_var, "n": n,
            "pass": bool(abs(mean) < k * se_mean and abs(var - 1.0) < k * se_var)}
