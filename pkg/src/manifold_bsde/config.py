"""JSON experiment configuration and builders for the library objects."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bsde, dirichlet
from . import forward_sde as fsde
from . import gauges as gg
from . import geometry as geo
from .errors import ConfigError, DomainError

BLOCKS = ("manifold", "diffusion", "drift", "terminal", "gauge", "solver", "diagnostics",
          "dirichlet")
_MISSING = object()

# recognised keys per block; nested objects are listed under their dotted path
KEYS = {
    "manifold": {"kind", "dim", "radius", "chart_bounds", "metric"},
    "diffusion": {"b", "b_value", "rate", "sigma", "y", "T", "steps", "paths", "seed"},
    "drift": {"name", "c", "A", "offset", "center", "strength"},
    "terminal": {"name", "p", "A", "offset", "center", "radius", "scale"},
    "gauge": {"kind", "a", "e", "eps", "center"},
    "solver": {"picard_max", "picard_tol", "basis_degree", "strict_outward", "domain", "z_init",
               "export_paths"},
    "solver.domain": {"center", "radius", "strict_ball"},
    "diagnostics": {"estimates", "samples", "params", "center", "radius", "count", "solve_pair", "q0",
                    "steps", "paths", "lattice"},
    "dirichlet": {"domain", "boundary_map", "query_grid", "T_max", "xi", "steps", "paths", "f_constant"},
    "dirichlet.domain": {"kind", "center", "radius", "low", "high"},
    "dirichlet.boundary_map": {"name", "p", "A", "offset"},
    "dirichlet.query_grid": {"per_axis", "shrink"},
}


@dataclass
class ExperimentConfig:
    manifold: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    drift: dict = field(default_factory=dict)
    terminal: dict = field(default_factory=dict)
    gauge: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    dirichlet: dict = field(default_factory=dict)
    output: str = "out"
    seed: int = 0
    raw_text: str = "{}"

    @property
    def sha256(self):
        return hashlib.sha256(self.raw_text.encode()).hexdigest()

    def as_dict(self):
        d = {b: getattr(self, b) for b in BLOCKS}
        d.update(output=self.output, seed=self.seed)
        return d


def _get(block, key, path, kind=float, default=_MISSING):
    full = f"{path}.{key}"
    if key not in block:
        if default is _MISSING:
            raise ConfigError(full, "is required")
        return default
    value = block[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "vector":
            return np.atleast_1d(np.asarray(value, dtype=float))
        if kind == "matrix":
            return np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(full, f"expected {getattr(kind, '__name__', kind)}, got {value!r}") from None
    return value


def _positive(value, path):
    if not value > 0:
        raise ConfigError(path, f"must be positive, got {value}")
    return value


def _block(raw, name):
    b = raw.get(name, {})
    if not isinstance(b, dict):
        raise ConfigError(name, "must be a JSON object")
    return b


def _check_keys(block, path):
    allowed = KEYS.get(path)
    if allowed is None or not isinstance(block, dict):
        return
    for key in sorted(block):
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")
        _check_keys(block[key], f"{path}.{key}")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(raw) - set(BLOCKS) - {"output", "seed"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")
    cfg = ExperimentConfig(**{b: _block(raw, b) for b in BLOCKS}, raw_text=text)
    for b in BLOCKS:
        _check_keys(getattr(cfg, b), b)
    cfg.output = _get(raw, "output", "<root>", str, "out")
    cfg.seed = _get(raw, "seed", "<root>", int, _get(cfg.diffusion, "seed", "diffusion", int, 0))
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return parse_config("{}")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc}") from None
    return parse_config(text)


def validate(cfg: ExperimentConfig):
    """Build every configured object once so that errors carry field paths."""
    m = build_manifold(cfg)
    if cfg.gauge:
        build_gauge(cfg, m)
    if cfg.diffusion:
        build_diffusion(cfg)
        build_grid(cfg)
    if cfg.drift:
        build_drift(cfg, m)
    if cfg.terminal:
        build_terminal(cfg, m)
    if cfg.solver:
        solver_options(cfg)
        build_domain(cfg, m)
    if cfg.dirichlet:
        build_dirichlet(cfg)


# --- builders ------------------------------------------------------------------

def build_manifold(cfg: ExperimentConfig):
    b = cfg.manifold
    kind = _get(b, "kind", "manifold", str, "sphere")
    bounds = b.get("chart_bounds")
    try:
        if kind == "flat":
            dim = _get(b, "dim", "manifold", int, 2)
            _positive(dim, "manifold.dim")
            return geo.flat(dim, bounds)
        if kind == "sphere":
            r = _positive(_get(b, "radius", "manifold", float, 1.0), "manifold.radius")
            return geo.sphere(r)
        if kind == "custom":
            metric = _get(b, "metric", "manifold", "matrix")
            if bounds is None:
                raise ConfigError("manifold.chart_bounds", "is required for custom charts")
            return geo.custom(lambda x: metric, bounds, vectorized=False)
    except DomainError as exc:
        raise ConfigError("manifold", str(exc)) from None
    raise ConfigError("manifold.kind", f"unknown manifold kind {kind!r}")


def build_gauge(cfg: ExperimentConfig, m):
    b = cfg.gauge
    kind = _get(b, "kind", "gauge", str, "sin_power")
    if kind == "emery":
        eps = _positive(_get(b, "eps", "gauge", float, 0.1), "gauge.eps")
        center = b.get("center")
        return gg.emery(eps, None if center is None else _get(b, "center", "gauge", "vector"))
    if kind == "sin_power":
        if "a" in b:
            a = _get(b, "a", "gauge", float)
        else:
            e = _get(b, "e", "gauge", float, 1.5)
            if not e > 1:
                raise ConfigError("gauge.e", f"must exceed 1, got {e}")
            a = gg.default_exponent(e)
        if not 1.0 < a < 2.0:
            raise ConfigError("gauge.a", f"must satisfy 1 < a < 2, got {a}")
        try:
            return gg.sin_power(m, a)
        except DomainError as exc:
            raise ConfigError("gauge", str(exc)) from None
    if kind == "distance_squared":
        return gg.distance_squared(m)
    raise ConfigError("gauge.kind", f"unknown gauge {kind!r}")


def build_diffusion(cfg: ExperimentConfig):
    b = cfg.diffusion
    y = _get(b, "y", "diffusion", "vector", np.zeros(1))
    d = y.size
    sig_name = b.get("sigma", "identity")
    if sig_name == "identity":
        vol = np.eye(d)
    else:
        vol = _get(b, "sigma", "diffusion", "matrix")
        if vol.shape[0] != d:
            raise ConfigError("diffusion.sigma", "needs one row per component of y")
    drift_name = b.get("b", "zero")
    if drift_name == "zero":
        return fsde.constant_coefficients(np.zeros(d), vol, y)
    if drift_name == "constant":
        c = _get(b, "b_value", "diffusion", "vector")
        if c.size != d:
            raise ConfigError("diffusion.b_value", "must match the dimension of y")
        return fsde.constant_coefficients(c, vol, y)
    if drift_name == "linear":
        rate = _get(b, "rate", "diffusion", float)
        return fsde.linear_drift(rate, vol, y)
    raise ConfigError("diffusion.b", f"unknown drift builtin {drift_name!r}")


def build_grid(cfg: ExperimentConfig):
    b = cfg.diffusion
    T = _positive(_get(b, "T", "diffusion", float, 1.0), "diffusion.T")
    steps = _positive(_get(b, "steps", "diffusion", int, 50), "diffusion.steps")
    return fsde.uniform_grid(T, steps)


def n_paths(cfg: ExperimentConfig, default=10_000):
    return _positive(_get(cfg.diffusion, "paths", "diffusion", int, default), "diffusion.paths")


def build_drift(cfg: ExperimentConfig, m):
    b = cfg.drift
    name = _get(b, "name", "drift", str, "zero")
    n = m.dim
    if name == "zero":
        return bsde.zero_drift()
    if name == "constant":
        c = _get(b, "c", "drift", "vector")
        if c.size != n:
            raise ConfigError("drift.c", f"must have {n} components")
        return bsde.constant_drift(c)
    if name == "linear":
        A = _get(b, "A", "drift", "matrix", None)
        offset = _get(b, "offset", "drift", "vector", None)
        return bsde.linear_drift(A, offset, n)
    if name == "radial":
        center = _get(b, "center", "drift", "vector", _default_center(m))
        return bsde.radial_drift(m, center, _get(b, "strength", "drift", float, 1.0))
    raise ConfigError("drift.name", f"unknown drift builtin {name!r}")


def _default_center(m):
    return np.array([np.pi / 2, 0.0]) if m.kind == "sphere" else np.zeros(m.dim)


def build_terminal(cfg: ExperimentConfig, m):
    b = cfg.terminal
    name = _get(b, "name", "terminal", str, "linear")
    if name == "constant":
        p = _get(b, "p", "terminal", "vector")
        return bsde.constant_terminal(p)
    if name == "linear":
        return bsde.linear_terminal(_get(b, "A", "terminal", "matrix", None),
                                    _get(b, "offset", "terminal", "vector", None), m.dim)
    if name == "square":
        k = _get(b, "scale", "terminal", float, 1.0)
        return bsde.TerminalCondition(lambda x: k * np.sum(x ** 2, axis=-1, keepdims=True), "square")
    if name == "ball":
        center = _get(b, "center", "terminal", "vector", _default_center(m))
        radius = _positive(_get(b, "radius", "terminal", float), "terminal.radius")
        return bsde.ball_terminal(m, center, radius, _get(b, "scale", "terminal", float, 1.0))
    raise ConfigError("terminal.name", f"unknown terminal builtin {name!r}")


def solver_options(cfg: ExperimentConfig):
    b = cfg.solver
    opts = {
        "picard_max": _positive(_get(b, "picard_max", "solver", int, bsde.PICARD_MAX), "solver.picard_max"),
        "tol": _positive(_get(b, "picard_tol", "solver", float, bsde.PICARD_TOL), "solver.picard_tol"),
        "degree": _get(b, "basis_degree", "solver", int, bsde.BASIS_DEGREE),
    }
    if opts["degree"] < 0:
        raise ConfigError("solver.basis_degree", "must be nonnegative")
    return opts


def build_domain(cfg: ExperimentConfig, m):
    """Geodesic ball from ``solver.domain`` or ``None``."""
    b = cfg.solver.get("domain")
    if b is None:
        return None
    if not isinstance(b, dict):
        raise ConfigError("solver.domain", "must be a JSON object")
    center = _get(b, "center", "solver.domain", "vector", _default_center(m))
    radius = _positive(_get(b, "radius", "solver.domain", float), "solver.domain.radius")
    if _get(b, "strict_ball", "solver.domain", bool, False):
        K = m.curvature_bound
        if not radius * np.sqrt(K) < np.pi / 2:
            raise ConfigError("solver.domain.radius", "rho * sqrt(K) must be below pi/2 in strict ball mode")
    try:
        return bsde.geodesic_ball(m, center, radius)
    except DomainError as exc:
        raise ConfigError("solver.domain.center", str(exc)) from None


def build_source_domain(b):
    kind = _get(b, "kind", "dirichlet.domain", str, "disk")
    try:
        if kind == "disk":
            return dirichlet.disk(_get(b, "center", "dirichlet.domain", "vector", np.zeros(2)),
                                  _get(b, "radius", "dirichlet.domain", float, 1.0))
        if kind == "interval":
            return dirichlet.interval(_get(b, "low", "dirichlet.domain", float, -1.0),
                                      _get(b, "high", "dirichlet.domain", float, 1.0))
        if kind == "box":
            return dirichlet.box(_get(b, "low", "dirichlet.domain", "vector"),
                                 _get(b, "high", "dirichlet.domain", "vector"))
    except DomainError as exc:
        raise ConfigError("dirichlet.domain", str(exc)) from None
    raise ConfigError("dirichlet.domain.kind", f"unknown domain kind {kind!r}")


def build_boundary_map(b):
    spec = b.get("boundary_map", "x")
    name = spec if isinstance(spec, str) else spec.get("name") if isinstance(spec, dict) else None
    params = spec if isinstance(spec, dict) else {}
    if name == "x":
        return dirichlet.coordinate_map(0)
    if name == "y":
        return dirichlet.coordinate_map(1)
    if name == "x2-y2":
        return dirichlet.harmonic_quadratic_map()
    if name == "constant":
        return dirichlet.constant_map(_get(params, "p", "dirichlet.boundary_map", "vector"))
    if name == "linear":
        return dirichlet.linear_map(_get(params, "A", "dirichlet.boundary_map", "matrix"),
                                    _get(params, "offset", "dirichlet.boundary_map", "vector", None))
    raise ConfigError("dirichlet.boundary_map", f"unknown boundary map {spec!r}")


def build_dirichlet(cfg: ExperimentConfig):
    """``(problem, grid, paths, query_points, xi)`` from the dirichlet block."""
    b = cfg.dirichlet
    dom_block = b.get("domain", {"kind": "disk"})
    if not isinstance(dom_block, dict):
        raise ConfigError("dirichlet.domain", "must be a JSON object")
    dom = build_source_domain(dom_block)
    T = _positive(_get(b, "T_max", "dirichlet", float, 3.0), "dirichlet.T_max")
    steps = _positive(_get(b, "steps", "dirichlet", int, 600), "dirichlet.steps")
    P = _positive(_get(b, "paths", "dirichlet", int, 2000), "dirichlet.paths")
    xi = _get(b, "xi", "dirichlet", float, 0.5)
    if xi < 0:
        raise ConfigError("dirichlet.xi", "must be nonnegative")
    bmap = build_boundary_map(b)
    n = np.atleast_2d(bmap(dom.nearest_boundary(np.zeros((1, dom.dim))))).shape[-1]
    c = _get(b, "f_constant", "dirichlet", float, 0.0)
    drift = bsde.zero_drift() if c == 0 else bsde.constant_drift(np.full(n, c))
    qg = b.get("query_grid", {"per_axis": 5})
    if isinstance(qg, dict):
        q = dirichlet.regular_query_grid(dom, _get(qg, "per_axis", "dirichlet.query_grid", int, 5),
                                         _get(qg, "shrink", "dirichlet.query_grid", float, 0.9))
    else:
        q = np.atleast_2d(np.asarray(qg, dtype=float))
        if q.shape[1] != dom.dim:
            raise ConfigError("dirichlet.query_grid", "points must match the domain dimension")
    spec = fsde.brownian(dom.dim)
    problem = dirichlet.DirichletProblem(dom, spec, bmap, drift, geo.flat(n), T)
    return problem, fsde.uniform_grid(T, steps), P, q, xi
