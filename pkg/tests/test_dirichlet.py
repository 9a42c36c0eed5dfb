import numpy as np
import pytest

from manifold_bsde import bsde
from manifold_bsde import dirichlet as dr
from manifold_bsde import forward_sde as fs
from manifold_bsde import geometry as geo
from manifold_bsde.errors import DomainError, ReliabilityError, UnsupportedError

F1 = geo.flat(1)
S2 = geo.sphere()
SEC_ONE = 1.0 / np.cos(1.0)  # E exp(xi zeta) for the unit interval at xi = 1/2


def disk_problem(bmap, f=None, T=3.0, target=F1):
    return dr.DirichletProblem(dr.disk(), fs.brownian(2, start=[0.0, 0.0]), bmap,
                               f or bsde.zero_drift(), target, T)


def interval_problem(bmap=None, c=0.0, T=3.0):
    d = bsde.constant_drift(c) if c else bsde.zero_drift()
    return dr.DirichletProblem(dr.interval(), fs.brownian(1, start=[0.0]), bmap or dr.constant_map(0.0),
                               d, F1, T)


def refined(estimate, coarse_steps, T):
    """Coarse and four-times-finer runs combined to cancel the sqrt(dt) exit bias."""
    (vc, sc), (vf, sf) = (estimate(fs.uniform_grid(T, n)) for n in (coarse_steps, 4 * coarse_steps))
    return 2 * vf - vc, np.hypot(2 * sf, sc)


class TestSourceDomain:
    def test_disk(self):
        d = dr.disk(radius=2.0)
        pts = np.array([[0.5, 0.0], [3.0, 4.0], [0.0, 0.0]])
        assert np.allclose(d.signed_gap(pts), [1.5, -3.0, 2.0])
        nb = d.nearest_boundary(pts)
        assert np.allclose(nb, [[2.0, 0.0], [1.2, 1.6], [2.0, 0.0]])
        assert d.inside(pts).tolist() == [True, False, True]
        assert d.diameter == 4.0

    def test_box(self):
        d = dr.box([0.0, 0.0], [2.0, 1.0])
        pts = np.array([[0.5, 0.4], [1.9, 0.5], [3.0, -1.0]])
        assert np.allclose(d.nearest_boundary(pts), [[0.5, 0.0], [2.0, 0.5], [2.0, 0.0]])
        assert np.all(d.on_boundary(d.nearest_boundary(pts)))

    def test_interval(self):
        d = dr.interval()
        assert d.dim == 1
        assert np.allclose(d.nearest_boundary(np.array([[0.3], [-0.6]])), [[1.0], [-1.0]])

    def test_bad_domains(self):
        with pytest.raises(DomainError):
            dr.disk(radius=0.0)
        with pytest.raises(DomainError):
            dr.box([0.0, 1.0], [1.0, 1.0])

    def test_query_grid(self):
        q = dr.regular_query_grid(dr.disk(), per_axis=5)
        assert q.shape == (25, 2) and np.all(dr.disk().inside(q))


class TestProblem:
    def test_infinite_horizon(self):
        with pytest.raises(DomainError):
            interval_problem(T=np.inf)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            dr.DirichletProblem(dr.disk(), fs.brownian(1), dr.constant_map(0.0), bsde.zero_drift(), F1, 1.0)

    def test_grid_past_cap(self):
        with pytest.raises(DomainError):
            dr.solve_dirichlet(interval_problem(T=1.0), fs.uniform_grid(2.0, 10), 10, 0)


class TestSolve:
    def test_constant_boundary_exact(self):
        p = disk_problem(dr.constant_map([0.4, -1.0]), target=geo.flat(2))
        est = dr.solve_dirichlet(p, fs.uniform_grid(3.0, 300), 500, 0, [[0.0, 0.0], [0.3, -0.2]])
        assert np.all(est.values == np.array([0.4, -1.0]))

    @pytest.mark.parametrize("bmap", [dr.coordinate_map(0), dr.harmonic_quadratic_map()])
    def test_harmonic_at_origin(self, bmap):
        est = dr.solve_dirichlet(disk_problem(bmap), fs.uniform_grid(3.0, 600), 2000, 1)
        assert abs(est.values[0, 0]) < 3 * est.std_errors[0, 0]
        assert est.truncation_mass[0] < 0.01

    def test_boundary_point_exact(self):
        p = disk_problem(dr.harmonic_quadratic_map())
        x = np.array([np.cos(0.3), np.sin(0.3)])
        est = dr.solve_dirichlet(p, fs.uniform_grid(1.0, 10), 100, 0, [x])
        assert est.values[0, 0] == pytest.approx(np.cos(0.6), abs=1e-12)
        assert est.std_errors[0, 0] == 0.0

    def test_outside_raises(self):
        with pytest.raises(DomainError):
            dr.solve_dirichlet(disk_problem(dr.coordinate_map(0)), fs.uniform_grid(1.0, 10), 10, 0,
                               [[2.0, 0.0]])

    def test_truncation_reliability(self):
        with pytest.raises(ReliabilityError):
            dr.solve_dirichlet(interval_problem(T=0.3), fs.uniform_grid(0.3, 60), 500, 0)

    def test_truncation_robustness(self):
        # flat, f = 0: the estimate is the mean of the terminal values and the
        # paths agree up to the shorter horizon, so only truncated paths move
        p = interval_problem(dr.coordinate_map(0), T=5.0)
        a = dr.solve_dirichlet(p, fs.uniform_grid(2.5, 500), 3000, 4)
        b = dr.solve_dirichlet(p, fs.uniform_grid(5.0, 1000), 3000, 4)
        assert a.truncation_mass[0] > 0.01
        assert abs(a.values[0, 0] - b.values[0, 0]) <= a.truncation_mass[0] * 2.0 + 1e-12

    def test_constant_drift_closed_form(self):
        c = 0.7

        def run(grid):
            e = dr.solve_dirichlet(interval_problem(c=c, T=6.0), grid, 4000, 1)
            return e.values[0, 0], e.std_errors[0, 0]

        value, se = refined(run, 600, 6.0)
        assert abs(value + c) < 3 * se

    def test_maximum_principle(self):
        p = disk_problem(dr.harmonic_quadratic_map())
        q = dr.regular_query_grid(p.source_domain, per_axis=3)
        est = dr.solve_dirichlet(p, fs.uniform_grid(3.0, 300), 1000, 2, q)
        v, s = est.values[:, 0], est.std_errors[:, 0]
        assert np.all(v >= -1 - 3 * s) and np.all(v <= 1 + 3 * s)

    def test_rows_and_columns(self):
        p = disk_problem(dr.constant_map(0.5))
        est = dr.solve_dirichlet(p, fs.uniform_grid(3.0, 300), 100, 0, [[0.0, 0.0]])
        assert est.columns() == ["x0", "x1", "value0", "std_error", "truncation_mass"]
        assert est.rows() == [[0.0, 0.0, 0.5, 0.0, 0.0]]


class TestStoppingIntegrability:
    def test_start_on_boundary(self):
        rep, mass = dr.stopping_integrability(interval_problem(), fs.uniform_grid(1.0, 10), 100, 0.5,
                                              start=[1.0])
        assert rep.estimate == 1.0 and mass == 0.0

    def test_half_matches_closed_form(self):
        def run(grid):
            rep, mass = dr.stopping_integrability(interval_problem(T=10.0), grid, 20_000, 0.5, seed=2)
            assert mass < 1e-3 and not rep.overflow
            return rep.estimate, rep.std_error

        value, se = refined(run, 5000, 10.0)
        assert abs(value - SEC_ONE) < 3 * se

    def test_stable_under_doubling(self):
        grid = fs.uniform_grid(10.0, 5000)
        a, _ = dr.stopping_integrability(interval_problem(T=10.0), grid, 10_000, 0.5, seed=3)
        b, _ = dr.stopping_integrability(interval_problem(T=10.0), grid, 20_000, 0.5, seed=4)
        assert np.isfinite(a.estimate)
        assert abs(a.estimate - b.estimate) < 3 * np.hypot(a.std_error, b.std_error)

    @pytest.mark.parametrize("xi", [100.0, 1000.0])
    def test_overflow(self, xi):
        rep, _ = dr.stopping_integrability(interval_problem(T=20.0), fs.uniform_grid(20.0, 4000), 20_000, xi)
        assert rep.overflow and rep.estimate == np.inf


class TestPdeResidual:
    def test_linear_field(self):
        p = disk_problem(dr.coordinate_map(0))
        q = dr.regular_query_grid(p.source_domain, per_axis=3)
        est = dr.solve_dirichlet(p, fs.uniform_grid(3.0, 300), 1000, 5, q)
        out = dr.pde_residual(est, p)
        assert out["passed"] and out["nodes"].shape == (1, 2)

    def test_constant_field_zero(self):
        p = disk_problem(dr.constant_map(0.3))
        q = dr.regular_query_grid(p.source_domain, per_axis=3)
        est = dr.solve_dirichlet(p, fs.uniform_grid(3.0, 100), 100, 0, q)
        assert dr.pde_residual(est, p)["max_abs"] == 0.0

    def test_curved_target_unsupported(self):
        EQ = np.array([np.pi / 2, 0.0])
        p = dr.DirichletProblem(dr.disk(), fs.brownian(2), dr.constant_map(EQ), bsde.zero_drift(), S2, 1.0)
        est = dr.FieldEstimate(np.zeros((1, 2)), EQ[None], np.zeros((1, 2)), np.zeros(1))
        with pytest.raises(UnsupportedError):
            dr.pde_residual(est, p)

    def test_irregular_grid(self):
        p = disk_problem(dr.constant_map(0.0))
        est = dr.FieldEstimate(np.array([[0.0, 0.0], [0.1, 0.2]]), np.zeros((2, 1)), np.zeros((2, 1)),
                               np.zeros(2))
        with pytest.raises(DomainError):
            dr.pde_residual(est, p)
