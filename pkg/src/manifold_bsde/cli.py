"""Command line experiment driver.

Every subcommand reads an optional JSON config, writes CSV/JSON artifacts to
the output directory together with ``manifest.json`` (config hash, seed,
versions, and the SHA-256 of each output), and exits with status 0 only when
all of its checks pass.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, bsde, diagnostics, dirichlet, estimates
from . import config as cf
from . import forward_sde as fsde
from .errors import ConfigError, ManifoldBsdeError
from .report import CSV_COLUMNS, _plain

SUBCOMMANDS = ("simulate", "solve", "check-estimates", "submartingale", "uniqueness",
               "nonuniqueness-demo", "dirichlet")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3
FLOAT_FMT = "%.17g"
DEFAULT_EXPORT_PATHS = 100


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return v


class Run:
    """Collects outputs, checks and warnings of one invocation."""

    def __init__(self, name, cfg: cf.ExperimentConfig, out: Path, seed: int, workers: int, strict: bool):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.workers = workers
        self.strict = strict
        self.files = []
        self.checks = {}
        self.warnings = []
        self.summary = {}
        out.mkdir(parents=True, exist_ok=True)

    def write_csv(self, fname, header, rows):
        path = self.out / fname
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.files.append(path)

    def write_json(self, fname, obj):
        path = self.out / fname
        path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
        self.files.append(path)

    def check(self, name, passed):
        self.checks[name] = bool(passed)

    @property
    def passed(self):
        ok = all(self.checks.values())
        return ok and not (self.strict and self.warnings)

    def manifest(self):
        outputs = [{"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                   for p in self.files]
        record = {
            "subcommand": self.name,
            "config_sha256": self.cfg.sha256,
            "config": self.cfg.as_dict(),
            "seed": self.seed,
            "workers": self.workers,
            "strict": self.strict,
            "versions": {"manifold_bsde": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "outputs": outputs,
            "checks": self.checks,
            "warnings": self.warnings,
            "summary": self.summary,
            "pass": self.passed,
        }
        (self.out / "manifest.json").write_text(json.dumps(_plain(record), indent=2, sort_keys=True) + "\n")


# --- subcommands -----------------------------------------------------------------

def cmd_simulate(run: Run):
    cfg = run.cfg
    spec = cf.build_diffusion(cfg)
    grid = cf.build_grid(cfg)
    P = cf.n_paths(cfg, default=1000)
    B, W = fsde.simulate_diffusion(spec, grid, P, run.seed, run.workers)
    d, dw = B.paths.shape[-1], W.paths.shape[-1]
    header = ["path", "step", "time"] + [f"b{j}" for j in range(d)] + [f"w{j}" for j in range(dw)]
    rows = ([p, i, grid[i], *B.paths[p, i], *W.paths[p, i]]
            for p in range(P) for i in range(grid.size))
    run.write_csv("ensemble.csv", header, rows)
    norm = fsde.increment_normality(B.increments, grid)
    run.write_json("report.json", {"check": "increment_normality", "params": {"paths": P, "steps": grid.size - 1},
                                   "pass": norm["pass"], **norm})
    run.check("increment_normality", norm["pass"])
    run.summary = {"paths": P, "steps": grid.size - 1}


def _solve_setup(cfg):
    m = cf.build_manifold(cfg)
    d = cf.build_drift(cfg, m)
    tc = cf.build_terminal(cfg, m)
    spec = cf.build_diffusion(cfg)
    grid = cf.build_grid(cfg)
    P = cf.n_paths(cfg)
    dom = cf.build_domain(cfg, m)
    return m, d, tc, spec, grid, P, dom


def _solution_rows(sol, count):
    grid = sol.grid
    for p in range(min(count, sol.X.shape[0])):
        for i in range(grid.size):
            z = sol.Z[p, i].ravel() if i < grid.size - 1 else np.full(sol.Z[p, 0].size, np.nan)
            yield [p, i, grid[i], *sol.X[p, i], *sol.X_forward[p, i], *z]


def cmd_solve(run: Run):
    cfg = run.cfg
    m, d, tc, spec, grid, P, dom = _solve_setup(cfg)
    opts = cf.solver_options(cfg)
    z_init = cfg.solver.get("z_init", "zero")
    if z_init not in ("zero", "random"):
        raise ConfigError("solver.z_init", "must be 'zero' or 'random'")
    sol = bsde.solve_bsde(m, d, tc, spec, grid, P, run.seed, domain=dom, z_init=z_init,
                          init_seed=run.seed + 1, workers=run.workers, **opts)
    run.warnings.extend(sol.warnings)
    n = sol.X.shape[-1]
    zc = sol.Z.shape[-2] * sol.Z.shape[-1]
    header = (["path", "step", "time"] + [f"x{j}" for j in range(n)]
              + [f"x_forward{j}" for j in range(n)] + [f"z{j}" for j in range(zc)])
    export = cf._get(cfg.solver, "export_paths", "solver", int, DEFAULT_EXPORT_PATHS)
    run.write_csv("solution.csv", header, _solution_rows(sol, export))
    rng = np.random.default_rng(run.seed)
    audit = bsde.drift_spec_audit(d, m, 500, dim_b=spec.dim_d, dim_w=spec.dim_w, rng=rng)
    meta = sol.metadata()
    meta["audit"] = audit.json_record()
    run.check("picard_converged", True)
    run.check("drift_audit", audit.passed)
    if dom is not None:
        strict = cf._get(cfg.solver, "strict_outward", "solver", bool, False)
        out = bsde.check_pointing_outward(d, dom, m, 500, strict=strict, dim_b=spec.dim_d,
                                          dim_w=spec.dim_w, rng=rng)
        meta["pointing_outward"] = out.json_record()
        run.check("pointing_outward", out.passed)
    run.write_json("metadata.json", meta)
    run.summary = {"x0": sol.x0, "x0_std_error": sol.x0_std_error,
                   "picard_iterations": len(sol.picard_residuals)}


def cmd_check_estimates(run: Run):
    cfg = run.cfg
    m = cf.build_manifold(cfg) if cfg.manifold else None
    g = cf.build_gauge(cfg, m) if cfg.gauge and m is not None else None
    names = cfg.diagnostics.get("estimates", sorted(estimates.REGISTRY))
    if isinstance(names, str):
        names = [names]
    samples = cf._get(cfg.diagnostics, "samples", "diagnostics", int, 500)
    params = cfg.diagnostics.get("params", {})
    reports = []
    for name in names:
        if name not in estimates.REGISTRY:
            raise ConfigError("diagnostics.estimates", f"unknown estimate {name!r}")
        rep = estimates.verify_estimate(name, m, g, samples, params.get(name), run.seed)
        reports.append(rep)
        run.check(name, rep.passed)
    run.write_csv("estimates.csv", CSV_COLUMNS, ([r.csv_row()[c] for c in CSV_COLUMNS] for r in reports))
    run.write_json("report.json", [r.json_record() for r in reports])
    run.summary = {r.name: r.min_margin for r in reports}


def _ball(cfg, m):
    b = cfg.diagnostics
    center = cf._get(b, "center", "diagnostics", "vector", cf._default_center(m))
    radius = cf._get(b, "radius", "diagnostics", float, np.pi / 4)
    if not diagnostics.regular_ball_check(radius, m.curvature_bound):
        raise ConfigError("diagnostics.radius", "ball is not regular: need rho * sqrt(K) < pi/2")
    return center, radius


def cmd_submartingale(run: Run):
    cfg = run.cfg
    m = cf.build_manifold(cfg)
    d = cf.build_drift(cfg, m)
    center, radius = _ball(cfg, m)
    b = cfg.diagnostics
    count = cf._get(b, "count", "diagnostics", int, 10_000)
    e = cf._get(cfg.gauge, "e", "gauge", float, 1.5)
    rep = diagnostics.submartingale_certificate(m, d, center, radius, count=count, e=e, seed=run.seed)
    records = [rep.json_record()]
    run.check("submartingale_sum", rep.passed)
    if cf._get(b, "solve_pair", "diagnostics", bool, False):
        sol, sol2 = _solve_pair(run, m, d, center, radius, reflect=True)
        p = diagnostics.ball_params(m, e, lam=rep.fitted_constants.get("lambda", 0.0))
        S, _ = diagnostics.s_process(sol, sol2, p)
        inc = diagnostics.conditional_increment_check(S, sol.B.paths, mask=None)
        inc.name = "s_process_increments"
        q0 = cf._get(b, "q0", "diagnostics", float, 1.5)
        if not q0 > 1:
            raise ConfigError("diagnostics.q0", "q0 must exceed 1")
        moment = diagnostics.exp_moment_of_energy(sol, sol2, p.mu)
        inc.details["lq_norms"] = diagnostics.lq_norms(S, sorted({*diagnostics.LQ_EXPONENTS, q0}))
        inc.details["energy_exp_moment"] = moment.as_dict()
        records.append(inc.json_record())
        run.check("s_process_increments", inc.passed)
    run.write_json("report.json", records)
    run.summary = {r["check"]: r["min_margin"] for r in records}


def _solve_pair(run: Run, m, d, center, radius, reflect):
    """Two solutions on shared noise; the second uses a reflected terminal argument or a random start."""
    cfg = run.cfg
    spec = cf.build_diffusion(cfg) if cfg.diffusion else fsde.brownian(2)
    grid = cf.build_grid(cfg) if cfg.diffusion else fsde.uniform_grid(1.0, 50)
    P = cf.n_paths(cfg) if cfg.diffusion else 10_000
    tc = cf.build_terminal(cfg, m) if cfg.terminal else bsde.ball_terminal(m, center, 0.9 * radius)
    dom = bsde.geodesic_ball(m, center, radius)
    opts = cf.solver_options(cfg)
    B, W = fsde.simulate_diffusion(spec, grid, P, run.seed, run.workers)
    U = tc(B.paths[:, -1])
    sol = bsde.solve_on_paths(m, d, B, W, U, domain=dom, **opts)
    if reflect:
        U2 = tc(-B.paths[:, -1])
        sol2 = bsde.solve_on_paths(m, d, B, W, U2, domain=dom, **opts)
    else:
        sol2 = bsde.solve_on_paths(m, d, B, W, U, domain=dom, z_init="random",
                                   init_seed=run.seed + 1, **opts)
    run.warnings.extend(sol.warnings + sol2.warnings)
    return sol, sol2


def cmd_uniqueness(run: Run):
    cfg = run.cfg
    m = cf.build_manifold(cfg)
    d = cf.build_drift(cfg, m)
    center, radius = _ball(cfg, m)
    sol, sol2 = _solve_pair(run, m, d, center, radius, reflect=False)
    gap = diagnostics.uniqueness_gap(sol, sol2)
    tol = cf.solver_options(cfg)["tol"]
    threshold = 5 * tol
    run.check("uniqueness_gap", gap < threshold)
    run.write_json("report.json", {"check": "uniqueness_gap", "params": {"radius": radius, "threshold": threshold},
                                   "min_margin": threshold - gap, "standard_error": None,
                                   "pass": gap < threshold, "gap": gap,
                                   "picard_residuals": [sol.picard_residuals, sol2.picard_residuals]})
    run.summary = {"gap": gap}


def cmd_nonuniqueness_demo(run: Run):
    b = run.cfg.diagnostics
    steps = cf._get(b, "steps", "diagnostics", int, 1000)
    paths = cf._get(b, "paths", "diagnostics", int, 2000)
    lattice = cf._get(b, "lattice", "diagnostics", int, 8)
    res = diagnostics.nonuniqueness_demo(steps, paths, run.seed, lattice)
    rows = ([p, res.stop_index[p], res.grid[res.stop_index[p]], *res.X[p, -1], *res.X2[p, -1]]
            for p in range(res.X.shape[0]))
    run.write_csv("terminal_values.csv", ["path", "stop_index", "stop_time", "x_theta", "x_phi",
                                          "x2_theta", "x2_phi"], rows)
    rep = dict(res.report)
    run.write_json("report.json", {"check": "nonuniqueness", "params": {"steps": steps, "paths": paths,
                                                                        "lattice": lattice},
                                   "min_margin": None, "standard_error": None, **rep})
    run.check("nonuniqueness", rep["pass"])
    run.summary = {"distance_X0": rep["distance_X0"], "distance_is_pi": rep["distance_is_pi"]}


def cmd_dirichlet(run: Run):
    cfg = run.cfg
    problem, grid, P, q, xi = cf.build_dirichlet(cfg)
    est = dirichlet.solve_dirichlet(problem, grid, P, run.seed, q, run.workers)
    for info in est.details:
        run.warnings.extend(info.get("warnings", []))
    run.write_csv("field.csv", est.columns(), est.rows())
    dom = problem.source_domain
    records = []
    if isinstance(problem.drift, bsde.DriftSpec) and problem.drift.name == "zero":
        rng = np.random.default_rng(run.seed)
        bd = dom.nearest_boundary(rng.standard_normal((4000, dom.dim)) + (dom.center if dom.kind == "disk"
                                                                          else 0.5 * (dom.low + dom.high)))
        vals = np.atleast_2d(problem.boundary_map(bd))
        lo, hi = vals.min(axis=0), vals.max(axis=0)
        margin = np.minimum(est.values - lo + 3 * est.std_errors, hi - est.values + 3 * est.std_errors)
        ok = bool(np.all(margin >= 0))
        records.append({"check": "maximum_principle", "params": {"points": len(q)},
                        "min_margin": float(margin.min()), "standard_error": float(est.std_errors.max()),
                        "pass": ok})
        run.check("maximum_principle", ok)
    start = dom.center if dom.kind == "disk" else 0.5 * (dom.low + dom.high)
    mom, mass = dirichlet.stopping_integrability(problem, grid, P, xi, run.seed, start, run.workers)
    finite = not mom.overflow and np.isfinite(mom.estimate)
    records.append({"check": "stopping_integrability", "params": {"xi": xi}, "min_margin": None,
                    "standard_error": mom.std_error, "pass": finite, **mom.as_dict(),
                    "truncation_mass": mass})
    run.check("stopping_integrability", finite)
    if problem.target.kind == "flat" and len(q) >= 9:
        try:
            res = dirichlet.pde_residual(est, problem)
            records.append({"check": "pde_residual", "params": {}, "min_margin": None, "standard_error": None,
                            "pass": res["passed"], "max_abs": res["max_abs"],
                            "max_combined_se": float(res["combined_se"].max())})
        except ManifoldBsdeError as exc:
            records.append({"check": "pde_residual", "skipped": str(exc)})
    run.write_json("report.json", records)
    run.summary = {"max_truncation_mass": float(est.truncation_mass.max())}


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "check-estimates": cmd_check_estimates,
    "submartingale": cmd_submartingale,
    "uniqueness": cmd_uniqueness,
    "nonuniqueness-demo": cmd_nonuniqueness_demo,
    "dirichlet": cmd_dirichlet,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="manifold-bsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides config)")
        p.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: MANIFOLD_BSDE_WORKERS or 1)")
        p.add_argument("--strict", action="store_true", help="treat warnings as failures")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cf.load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        workers = fsde.default_workers() if args.workers is None else args.workers
        if workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        out = args.out if args.out is not None else Path(cfg.output)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    r = Run(args.command, cfg, out, seed, workers, args.strict)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            COMMANDS[args.command](r)
        r.warnings.extend(str(w.message) for w in caught if str(w.message) not in r.warnings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifoldBsdeError as exc:
        r.check(type(exc).__name__, False)
        r.summary = {"error": str(exc)}
        r.manifest()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    r.warnings = list(dict.fromkeys(r.warnings))
    r.manifest()
    for name, ok in r.checks.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    for w in r.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK if r.passed else EXIT_FAILED


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
