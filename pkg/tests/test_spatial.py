"""Spatial core: kernel, effective range, neighbor graph, NNGP factors and
log densities against dense-covariance oracles."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from forestsae.spatial import (CovParams, DuplicateLocationError, Location,
                               build_neighbor_graph, dense_covariance,
                               dense_gp_log_density, effective_range,
                               exp_correlation, nngp_factors,
                               nngp_log_density)


def random_locations(rng, n, scale=10.0):
    pts = rng.uniform(0, scale, (n, 2))
    return [Location(float(x), float(y), i) for i, (x, y) in enumerate(pts)]


class TestExpCorrelation:
    def test_zero_distance(self):
        assert exp_correlation(0.0, 0.079) == 1.0

    def test_effective_range_threshold(self):
        # 37.92 km is where correlation hits 0.05 at the reported mean decay
        assert exp_correlation(37.92, 0.079) == pytest.approx(0.05, abs=1e-4)

    def test_direct_evaluation(self):
        assert exp_correlation(10.0, 0.2) == pytest.approx(np.exp(-2.0),
                                                           abs=1e-12)

    def test_strictly_decreasing(self):
        d = np.linspace(0, 100, 50)
        vals = exp_correlation(d, 0.1)
        assert np.all(np.diff(vals) < 0)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            exp_correlation(-1.0, 0.1)
        with pytest.raises(ValueError):
            exp_correlation(np.inf, 0.1)
        with pytest.raises(ValueError):
            exp_correlation(1.0, 0.0)

    @given(st.floats(0.01, 50.0), st.floats(0.01, 50.0),
           st.floats(0.01, 5.0))
    def test_semigroup_in_distance(self, d1, d2, phi):
        lhs = exp_correlation(d1, phi) * exp_correlation(d2, phi)
        assert lhs == pytest.approx(exp_correlation(d1 + d2, phi), rel=1e-12)


class TestEffectiveRange:
    def test_reported_mean_decay(self):
        assert effective_range(0.079) == pytest.approx(37.92, abs=0.01)

    def test_reported_interval_endpoints(self):
        assert effective_range(0.026) == pytest.approx(115.22, abs=0.02)
        assert effective_range(0.118) == pytest.approx(25.39, abs=0.01)

    def test_unit_range(self):
        assert effective_range(-np.log(0.05)) == pytest.approx(1.0, abs=1e-12)

    def test_inverse_relation(self):
        for phi in (0.01, 0.3, 2.5):
            assert exp_correlation(effective_range(phi), phi) == \
                pytest.approx(0.05, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            effective_range(0.0)
        with pytest.raises(ValueError):
            effective_range(-1.0)


class TestNeighborGraph:
    def test_collinear_adjacent(self):
        locs = [Location(float(x), 0.0, x) for x in range(3)]
        g = build_neighbor_graph(locs, m=1, ordering="given")
        assert g.nbr_cnt.tolist() == [0, 1, 1]
        assert g.neighbors(1).tolist() == [0]
        assert g.neighbors(2).tolist() == [1]

    def test_unit_square_matches_bruteforce(self):
        locs = [Location(0, 0, 0), Location(1, 0, 1), Location(1, 1, 2),
                Location(0, 1, 3)]
        g = build_neighbor_graph(locs, m=2, ordering="given")
        coords = np.array([[p.x, p.y] for p in locs])
        for i in range(1, 4):
            d = np.linalg.norm(coords[:i] - coords[i], axis=1)
            expect = sorted(np.lexsort((np.arange(i), d))[: min(i, 2)])
            assert sorted(g.neighbors(i).tolist()) == expect

    def test_saturated_graph(self):
        rng = np.random.default_rng(0)
        locs = random_locations(rng, 12)
        g = build_neighbor_graph(locs, m=50, ordering="coord")
        for i in range(12):
            assert sorted(g.neighbors(i).tolist()) == list(range(i))

    def test_neighbors_precede(self):
        rng = np.random.default_rng(1)
        for ordering in ("coord", "given", "maxmin"):
            g = build_neighbor_graph(random_locations(rng, 40), m=6,
                                     ordering=ordering)
            for i in range(g.n):
                assert np.all(g.neighbors(i) < i)
                assert g.nbr_cnt[i] == min(i, 6)

    def test_duplicates_rejected_with_ids(self):
        locs = [Location(1.0, 1.0, 7), Location(1.0, 1.0, 9),
                Location(2.0, 2.0, 11)]
        with pytest.raises(DuplicateLocationError, match="7"):
            build_neighbor_graph(locs, m=1)

    def test_duplicates_jittered(self):
        locs = [Location(1.0, 1.0, 0), Location(1.0, 1.0, 1)]
        g = build_neighbor_graph(locs, m=1, jitter=True,
                                 rng=np.random.default_rng(5))
        assert g.n == 2
        assert not np.array_equal(g.coords[0], g.coords[1])

    def test_children_consistent(self):
        rng = np.random.default_rng(2)
        g = build_neighbor_graph(random_locations(rng, 30), m=4)
        ptr, idx, pos = g.children()
        for parent in range(g.n):
            for e in range(ptr[parent], ptr[parent + 1]):
                child = idx[e]
                assert g.nbr_idx[child, pos[e]] == parent


class TestNngpFactors:
    def test_single_neighbor_hand_solve(self):
        d, sigma2, phi = 2.0, 3.0, 0.4
        locs = [Location(0, 0, 0), Location(d, 0, 1)]
        g = build_neighbor_graph(locs, m=1, ordering="given")
        f = nngp_factors(g, CovParams(sigma2, phi))
        rho = np.exp(-phi * d)
        assert f.a_vector(1)[0] == pytest.approx(rho, abs=1e-14)
        assert f.delta2[1] == pytest.approx(sigma2 * (1 - rho ** 2), abs=1e-12)

    def test_unconditioned_node(self):
        g = build_neighbor_graph([Location(0, 0, 0), Location(1, 0, 1)],
                                 m=1, ordering="given")
        f = nngp_factors(g, CovParams(5.0, 0.2))
        assert f.a_vector(0).size == 0
        assert f.delta2[0] == pytest.approx(5.0)

    def test_delta2_positive_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            locs = random_locations(rng, 50)
            params = CovParams(float(rng.uniform(0.1, 10)),
                               float(rng.uniform(0.05, 3)))
            f = nngp_factors(build_neighbor_graph(locs, m=8), params)
            assert np.all(f.delta2 > 0)
            assert np.all(f.delta2 <= params.sigma2 + 1e-12)


class TestLogDensities:
    def test_zero_vector(self):
        rng = np.random.default_rng(4)
        locs = random_locations(rng, 15)
        g = build_neighbor_graph(locs, m=5)
        f = nngp_factors(g, CovParams(2.0, 0.5))
        expect = -0.5 * np.sum(np.log(2 * np.pi * f.delta2))
        assert nngp_log_density(np.zeros(15), f, g) == \
            pytest.approx(expect, abs=1e-10)

    def test_two_point_closed_form(self):
        # d = 1 km, sigma2 = 1, phi = 1: bivariate normal with rho = e^-1
        locs = [Location(0, 0, 0), Location(1, 0, 1)]
        g = build_neighbor_graph(locs, m=1, ordering="given")
        f = nngp_factors(g, CovParams(1.0, 1.0))
        w = np.array([0.3, -0.7])
        rho = np.exp(-1.0)
        quad = (w[0] ** 2 - 2 * rho * w[0] * w[1] + w[1] ** 2) / (1 - rho ** 2)
        expect = -np.log(2 * np.pi) - 0.5 * np.log(1 - rho ** 2) - 0.5 * quad
        assert nngp_log_density(w, f, g) == pytest.approx(expect, abs=1e-12)
        assert dense_gp_log_density(w, locs, CovParams(1.0, 1.0)) == \
            pytest.approx(expect, abs=1e-12)

    def test_dense_single_point(self):
        assert dense_gp_log_density([0.0], [Location(0, 0, 0)],
                                    CovParams(1.0, 1.0)) == \
            pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)

    def test_dimension_mismatch(self):
        locs = [Location(0, 0, 0), Location(1, 0, 1)]
        g = build_neighbor_graph(locs, m=1)
        f = nngp_factors(g, CovParams(1.0, 1.0))
        with pytest.raises(ValueError):
            nngp_log_density(np.zeros(3), f, g)

    def test_dense_guard(self):
        rng = np.random.default_rng(5)
        coords = rng.uniform(0, 1, (5001, 2))
        with pytest.raises(ValueError, match="guard"):
            dense_gp_log_density(np.zeros(5001), coords, CovParams(1, 1))

    def test_saturation_equivalence(self):
        # saturated neighbor sets recover the exact joint density
        rng = np.random.default_rng(6)
        for _ in range(50):
            n = int(rng.integers(3, 40))
            locs = random_locations(rng, n)
            params = CovParams(float(rng.uniform(0.2, 5)),
                               float(rng.uniform(0.05, 2)))
            g = build_neighbor_graph(locs, m=n - 1)
            f = nngp_factors(g, params)
            w = rng.normal(0, 1, n)
            assert abs(nngp_log_density(w, f, g)
                       - dense_gp_log_density(w, locs, params)) < 1e-8

    def test_monotone_approximation_in_m(self):
        rng = np.random.default_rng(7)
        n = 40
        errs = np.zeros(5)
        for _ in range(20):
            locs = random_locations(rng, n)
            params = CovParams(1.5, 0.3)
            w = rng.normal(0, 1, n)
            dense = dense_gp_log_density(w, locs, params)
            for k, m in enumerate((1, 2, 4, 8, n - 1)):
                g = build_neighbor_graph(locs, m=m)
                f = nngp_factors(g, params)
                errs[k] += abs(nngp_log_density(w, f, g) - dense)
        errs /= 20
        assert np.all(np.diff(errs) <= 1e-9)
        assert errs[-1] < 1e-8
