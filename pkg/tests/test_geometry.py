import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manifold_bsde import geometry as geo
from manifold_bsde.errors import AmbiguityError, DomainError, EscapeError

S2 = geo.sphere()
F2 = geo.flat(2)
EQ = np.array([np.pi / 2, 0.0])

theta = st.floats(0.4, np.pi - 0.4)
phi = st.floats(-1.5, 1.5)


def embedded_transport(p, q, w):
    """Great-circle transport of an embedded tangent vector ``w`` at ``p`` to ``q``."""
    c = np.dot(p, q)
    return w - np.dot(w, q) / (1.0 + c) * (p + q)


def sphere_fd_christoffel(th):
    """Christoffels of diag(1, sin^2) from a central difference of g_phiphi."""
    h = 1e-6
    dg = (np.sin(th + h) ** 2 - np.sin(th - h) ** 2) / (2 * h)
    return -0.5 * dg, 0.5 * dg / np.sin(th) ** 2


class TestChristoffel:
    def test_flat_zero(self):
        assert np.all(geo.christoffel_at(F2, np.array([0.3, -2.0])) == 0.0)

    def test_sphere_at_quarter(self):
        gam = geo.christoffel_at(S2, np.array([np.pi / 4, 0.3]))
        g_tpp, g_ptp = sphere_fd_christoffel(np.pi / 4)
        assert gam[0, 1, 1] == pytest.approx(-0.5, abs=1e-12)
        assert gam[0, 1, 1] == pytest.approx(g_tpp, abs=1e-8)
        assert gam[1, 0, 1] == pytest.approx(1.0, abs=1e-12)
        assert gam[1, 1, 0] == pytest.approx(g_ptp, abs=1e-8)
        mask = np.ones_like(gam, dtype=bool)
        mask[0, 1, 1] = mask[1, 0, 1] = mask[1, 1, 0] = False
        assert np.all(gam[mask] == 0.0)

    def test_sphere_equator_vanishes(self):
        assert np.allclose(geo.christoffel_at(S2, EQ), 0.0, atol=1e-15)

    @given(theta, phi)
    @settings(max_examples=40, deadline=None)
    def test_custom_matches_builtin(self, th, ph):
        m = geo.custom(lambda x: np.stack([np.stack([np.ones_like(x[..., 0]), 0 * x[..., 0]], -1),
                                           np.stack([0 * x[..., 0], np.sin(x[..., 0]) ** 2], -1)], -2),
                       [(0.1, np.pi - 0.1), (-7.0, 7.0)], curvature_bound=1.0)
        x = np.array([th, ph])
        gc = geo.christoffel_at(m, x)
        assert np.allclose(gc, geo.christoffel_at(S2, x), atol=1e-8)
        assert np.max(np.abs(gc - np.swapaxes(gc, -1, -2))) <= 1e-9

    def test_outside_chart(self):
        with pytest.raises(DomainError):
            geo.christoffel_at(S2, np.array([0.0, 0.0]))


class TestGeodesic:
    def test_flat_line(self):
        x, v = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        assert np.allclose(geo.geodesic(F2, x, v, 2.0), x + 2.0 * v)

    def test_equator(self):
        y = geo.geodesic(S2, EQ, np.array([0.0, 1.0]), 1.0)
        assert np.allclose(y, [np.pi / 2, 1.0], atol=1e-9)

    def test_rest(self):
        x = np.array([1.0, 0.4])
        assert np.allclose(geo.geodesic(S2, x, np.zeros(2), 3.0), x)

    def test_escape(self):
        with pytest.raises(EscapeError):
            geo.geodesic(S2, np.array([0.3, 0.0]), np.array([-1.0, 0.0]), 1.0)

    def test_speed_conserved(self):
        rng = np.random.default_rng(3)
        x = geo.sample_ball(S2, EQ, 0.5, 50, rng)
        v = geo.random_unit_vectors(S2, x, rng) * 0.8
        y, w = geo.geodesic(S2, x, v, 1.0, step=1e-3, return_velocity=True)
        assert np.max(np.abs(geo.riemannian_norm(S2, y, w) - 0.8)) < 1e-6


class TestConnectAndDistance:
    def test_flat(self):
        x, y = np.array([0.0, 1.0]), np.array([2.0, -1.0])
        assert np.allclose(geo.geodesic_connect(F2, x, y), y - x)

    def test_same_point(self):
        x = np.array([1.2, 0.3])
        assert np.allclose(geo.geodesic_connect(S2, x, x), 0.0)
        assert geo.distance(S2, x, x) == pytest.approx(0.0, abs=1e-12)

    def test_quarter_circle(self):
        y = np.array([np.pi / 2, np.pi / 2])
        v = geo.geodesic_connect(S2, EQ, y)
        assert v[0] == pytest.approx(0.0, abs=1e-12)
        assert geo.riemannian_norm(S2, EQ, v) == pytest.approx(np.pi / 2, abs=1e-12)
        assert geo.distance(S2, EQ, y) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_antipodal(self):
        with pytest.raises(AmbiguityError):
            geo.geodesic_connect(S2, EQ, np.array([np.pi / 2, np.pi]))

    def test_arccos_oracle(self):
        rng = np.random.default_rng(11)
        x = np.column_stack([rng.uniform(0.2, np.pi - 0.2, 100), rng.uniform(-3, 3, 100)])
        y = np.column_stack([rng.uniform(0.2, np.pi - 0.2, 100), rng.uniform(-3, 3, 100)])
        p, q = geo.sphere_embed(S2, x), geo.sphere_embed(S2, y)
        oracle = np.arccos(np.clip(np.sum(p * q, axis=1), -1, 1))
        assert np.max(np.abs(geo.distance(S2, x, y) - oracle)) < 1e-8

    @given(theta, phi, theta, phi)
    @settings(max_examples=30, deadline=None)
    def test_round_trip(self, t1, p1, t2, p2):
        x, y = np.array([t1, p1]), np.array([t2, p2])
        d = float(geo.distance(S2, x, y))
        if d > 2.5 or d < 1e-6:
            return
        v = geo.geodesic_connect(S2, x, y)
        try:
            end = geo.geodesic(S2, x, v, 1.0)
        except EscapeError:
            return
        assert float(geo.distance(S2, end, y)) < 1e-6

    def test_custom_shooting(self):
        m = geo.custom(lambda x: np.diag([1.0, 4.0]), [(-2, 2), (-2, 2)], vectorized=False)
        x, y = np.array([0.1, 0.2]), np.array([0.5, -0.3])
        assert np.allclose(geo.geodesic_connect(m, x, y), y - x, atol=1e-7)
        assert geo.distance(m, x, y) == pytest.approx(np.sqrt(0.4 ** 2 + 4 * 0.5 ** 2), abs=1e-7)


class TestTransport:
    def test_flat_identity(self):
        z = np.array([0.3, 0.1])
        assert np.allclose(geo.parallel_transport(F2, np.zeros(2), np.ones(2), z), z)

    def test_normal_to_equator(self):
        out = geo.parallel_transport(S2, EQ, np.array([np.pi / 2, np.pi / 2]), np.array([1.0, 0.0]))
        assert np.allclose(out, [1.0, 0.0], atol=1e-9)

    def test_self_parallel(self):
        x, y = np.array([1.0, 0.2]), np.array([1.9, 0.9])
        v0, v1 = geo.geodesic_connect(S2, x, y), -geo.geodesic_connect(S2, y, x)
        assert np.allclose(geo.parallel_transport(S2, x, y, v0), v1, atol=1e-8)

    def test_frames_match_vectors(self):
        x, y = np.array([1.0, 0.2]), np.array([1.6, -0.4])
        z = np.array([[0.2, -1.0], [0.7, 0.3]])
        pf = geo.parallel_transport(S2, x, y, z)
        for k in range(2):
            assert np.allclose(pf[:, k], geo.parallel_transport(S2, x, y, z[:, k]), atol=1e-12)

    def test_closed_form_transport_matches_ode(self):
        rng = np.random.default_rng(5)
        x, y = geo.sample_pairs(S2, rng, 200, EQ, 0.6, (0.05, 1.0))
        z = rng.standard_normal(x.shape)
        ode = geo.parallel_transport(S2, x, y, z)
        closed = geo.sphere_transport(S2, x, y, z)
        assert np.max(np.abs(ode - closed)) < 1e-8
        p, q = geo.sphere_embed(S2, x), geo.sphere_embed(S2, y)
        w = geo.sphere_vector_to_embedded(S2, x, z)
        ref = np.array([embedded_transport(a, b, c) for a, b, c in zip(p, q, w)])
        assert np.max(np.abs(geo.sphere_vector_to_embedded(S2, y, closed) - ref)) < 1e-9


class TestNorms:
    def test_flat(self):
        assert geo.riemannian_norm(F2, np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(5.0)

    def test_sphere_equator(self):
        assert geo.riemannian_norm(S2, EQ, np.array([0.0, 1.0])) == pytest.approx(1.0)

    def test_zero(self):
        assert geo.riemannian_norm(S2, np.array([0.7, 0.0]), np.zeros(2)) == 0.0

    def test_frame_norm_sums_columns(self):
        x = np.array([0.8, 0.1])
        z = np.array([[1.0, 0.5], [0.3, -2.0]])
        expect = np.sqrt(geo.riemannian_norm(S2, x, z[:, 0]) ** 2 + geo.riemannian_norm(S2, x, z[:, 1]) ** 2)
        assert geo.frame_norm(S2, x, z) == pytest.approx(expect)


class TestTransportComparison:
    def test_flat_ratio_zero(self):
        rng = np.random.default_rng(0)
        x, y = geo.sample_pairs(F2, rng, 200, np.zeros(2), 1.0, (0.0, 0.5))
        rep = geo.transport_comparison_margin(F2, x, y, rng.standard_normal(x.shape))
        assert rep.fitted_constants["C_tp3"] == 0.0

    def test_sphere_same_point(self):
        rng = np.random.default_rng(0)
        x = geo.sample_ball(S2, EQ, 0.5, 50, rng)
        rep = geo.transport_comparison_margin(S2, x, x, rng.standard_normal(x.shape))
        assert rep.fitted_constants["C_tp3"] == 0.0

    def test_sphere_constant_finite(self):
        rng = np.random.default_rng(1)
        x, y = geo.sample_pairs(S2, rng, 1000, EQ, 0.5, (0.01, 0.5))
        rep = geo.transport_comparison_margin(S2, x, y, rng.standard_normal(x.shape))
        assert np.isfinite(rep.fitted_constants["C"]) and rep.passed

    def test_fitted_constant_stable_under_resampling(self):
        consts = [geo.fit_transport_constant(S2, EQ, 0.5, (0.01, 0.5), 1000, np.random.default_rng(s))[0]
                  for s in (1, 2, 3)]
        assert np.all(np.isfinite(consts))
        assert max(consts) - min(consts) <= 0.1 * max(consts)

    def test_fitted_constant_bounds_samples(self):
        rng = np.random.default_rng(9)
        C = geo.fit_transport_constant(S2, EQ, 0.5, (0.01, 0.5), 1000, rng)[0]
        x, y = geo.sample_pairs(S2, rng, 2000, EQ, 0.5, (0.01, 0.5))
        rep = geo.transport_comparison_margin(S2, x, y, rng.standard_normal(x.shape), C=C)
        assert rep.fitted_constants["C_tp3"] <= C
