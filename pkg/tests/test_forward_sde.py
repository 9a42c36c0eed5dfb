import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manifold_bsde import forward_sde as fs
from manifold_bsde.errors import DomainError, NumericalError


def unit_interval(x):
    return np.abs(x[..., 0]) < 1.0


class TestSimulate:
    def test_frozen(self):
        spec = fs.constant_coefficients([0.0, 0.0], np.zeros((2, 2)), [0.3, -1.0])
        B, _ = fs.simulate_diffusion(spec, fs.uniform_grid(1.0, 10), 5, 0)
        assert np.all(B.paths == np.array([0.3, -1.0]))

    def test_constant_drift(self):
        spec = fs.constant_coefficients([1.0], [[0.0]], [0.0])
        B, _ = fs.simulate_diffusion(spec, fs.uniform_grid(1.0, 7), 3, 0)
        assert np.allclose(B.paths[:, -1, 0], 1.0, atol=1e-15)

    def test_brownian_variance(self):
        B, _ = fs.simulate_diffusion(fs.brownian(1), fs.uniform_grid(2.0, 4), 100_000, 1)
        bt = B.paths[:, -1, 0]
        var = bt.var(ddof=1)
        se = 2.0 * np.sqrt(2.0 / (bt.size - 1))
        assert abs(var - 2.0) < 3 * se

    def test_start_and_increments(self):
        spec = fs.brownian(2, start=[1.0, 2.0])
        B, W = fs.simulate_diffusion(spec, fs.uniform_grid(1.0, 20), 50, 3)
        assert np.all(B.paths[:, 0] == [1.0, 2.0])
        assert np.allclose(np.diff(W.paths, axis=1), W.increments)
        assert np.allclose(B.paths - B.paths[:, :1], W.paths)

    def test_seed_determinism_and_workers(self):
        spec = fs.linear_drift(0.5, [[1.0]], [0.2])
        grid = fs.uniform_grid(1.0, 30)
        a, _ = fs.simulate_diffusion(spec, grid, 200, 42, workers=1)
        b, _ = fs.simulate_diffusion(spec, grid, 200, 42, workers=4)
        c, _ = fs.simulate_diffusion(spec, grid, 50, 42)
        assert np.array_equal(a.paths, b.paths)
        assert np.array_equal(a.paths[:50], c.paths)
        d, _ = fs.simulate_diffusion(spec, grid, 200, 43)
        assert not np.array_equal(a.paths, d.paths)

    def test_nonfinite_reported(self):
        spec = fs.DiffusionSpec(lambda x: np.where(x > 0.5, np.inf, 1.0), lambda x: np.zeros(x.shape + (1,)),
                                np.zeros(1), 1)
        with pytest.raises(NumericalError, match="step 6 on path 0"):
            fs.simulate_diffusion(spec, fs.uniform_grid(1.0, 10), 2, 0)

    def test_bad_grid(self):
        with pytest.raises(DomainError):
            fs.check_grid([0.0, 0.5, 0.5])
        with pytest.raises(DomainError):
            fs.simulate_diffusion(fs.brownian(1), fs.uniform_grid(1, 3), 0, 0)

    def test_increment_normality(self):
        grid = np.concatenate([[0.0], np.cumsum(np.linspace(0.01, 0.05, 40))])
        dW = fs.brownian_increments(7, 2000, grid, 2)
        rep = fs.increment_normality(dW, grid)
        assert rep["pass"] and abs(rep["mean_z"]) < 4 and abs(rep["variance_z"]) < 4

    def test_weak_order_one(self):
        # coupled grids: coarse increments are sums of fine ones
        spec = fs.linear_drift(1.0, [[1.0]], [1.0])
        P, Nf = 100_000, 40
        fine = fs.brownian_increments(5, P, fs.uniform_grid(1.0, Nf), 1)
        means = []
        for k in (4, 2, 1):
            dW = fine.reshape(P, Nf // k, k, 1).sum(axis=2)
            B = fs.euler_maruyama(spec, fs.uniform_grid(1.0, Nf // k), dW)
            means.append(np.mean(B[:, -1, 0] ** 2))
        ratio = (means[0] - means[1]) / (means[1] - means[2])
        assert 1.5 <= ratio <= 3.0


class TestHitting:
    def test_start_outside(self):
        B, _ = fs.simulate_diffusion(fs.brownian(1, start=[2.0]), fs.uniform_grid(1.0, 5), 4, 0)
        assert np.all(fs.hitting_time(B, unit_interval) == 0)

    def test_never_exits(self):
        spec = fs.constant_coefficients([0.0], [[0.0]], [0.0])
        B, _ = fs.simulate_diffusion(spec, fs.uniform_grid(1.0, 5), 4, 0)
        assert np.all(fs.hitting_time(B, unit_interval) == 5)

    def test_first_exit_index(self):
        paths = np.array([[0.0, 0.5, 1.2, 0.3], [0.0, -0.2, 0.1, 0.4]])[..., None]
        ens = fs.PathEnsemble(np.linspace(0, 1, 4), paths)
        assert fs.hitting_time(ens, unit_interval).tolist() == [2, 3]

    def test_streaming_matches_stored(self):
        spec = fs.brownian(1)
        grid = fs.uniform_grid(2.0, 400)
        B, _ = fs.simulate_diffusion(spec, grid, 300, 9)
        stored = fs.hitting_time(B, unit_interval)
        idx, exited, pos = fs.simulate_exit_indices(spec, grid, 300, 9, unit_interval, chunk=37)
        assert np.array_equal(idx, stored)
        assert np.array_equal(exited, ~unit_interval(B.paths).all(axis=1))
        hit = exited
        assert np.allclose(pos[hit], B.paths[np.flatnonzero(hit), idx[hit]])

    def test_mean_exit_time(self):
        grid = fs.uniform_grid(10.0, 10_000)
        idx, exited, _ = fs.simulate_exit_indices(fs.brownian(1), grid, 100_000, 2, unit_interval)
        assert exited.all()
        assert abs(grid[idx].mean() - 1.0) < 0.05


class TestExpMoment:
    def test_zero_xi(self):
        assert fs.exp_moment(np.array([1.0, 5.0]), 0.0).estimate == 1.0

    @given(st.floats(-3, 3), st.floats(0, 5))
    @settings(max_examples=50, deadline=None)
    def test_deterministic(self, v, xi):
        rep = fs.exp_moment(np.full(10, v), xi)
        assert rep.estimate == pytest.approx(np.exp(xi * v), rel=1e-12)

    def test_overflow_flag(self):
        rep = fs.exp_moment(np.array([0.5, 1.0]), 1000.0)
        assert rep.overflow and rep.estimate == float("inf")

    def test_negative_xi(self):
        with pytest.raises(DomainError):
            fs.exp_moment(np.ones(3), -1.0)

    def test_exit_time_moment_stable(self):
        grid = fs.uniform_grid(10.0, 5000)
        ests = []
        for P, seed in ((20_000, 1), (40_000, 2)):
            idx, _, _ = fs.simulate_exit_indices(fs.brownian(1), grid, P, seed, unit_interval)
            ests.append(fs.exp_moment(grid[idx], 0.5))
        a, b = ests
        assert np.isfinite(a.estimate) and not a.overflow
        assert abs(a.estimate - b.estimate) < 3 * np.hypot(a.std_error, b.std_error)
