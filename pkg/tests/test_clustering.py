import numpy as np
import pytest

from conftest import blob_points, unit_rows
from reference import brute_force_dbscan, canonical
from trackmill.clustering import (
    NOISE,
    ClusterConfig,
    CosineDBSCAN,
    compute_eps,
    dbscan,
    eps_from_distances,
    pairwise_cosine_distance,
)
from trackmill.exceptions import ConfigError, DegenerateInputError, IntegrityError


class TestDistances:
    def test_identical_rows(self):
        x = np.tile([[0.6, 0.8]], (4, 1))
        np.testing.assert_array_equal(pairwise_cosine_distance(x), np.zeros((4, 4)))

    def test_orthogonal_pair(self):
        d = pairwise_cosine_distance(np.eye(2))
        assert d[0, 1] == 1.0 and d[1, 0] == 1.0

    def test_matches_double_loop(self):
        x = unit_rows(np.random.default_rng(0), 40, 16)
        d = pairwise_cosine_distance(x)
        naive = np.array([[1.0 - sum(a * b for a, b in zip(u, v)) for v in x] for u in x])
        np.fill_diagonal(naive, 0.0)
        np.testing.assert_allclose(d, naive, atol=1e-12)
        assert np.max(np.abs(d - d.T)) <= 1e-7

    def test_rejects_non_unit_rows(self):
        with pytest.raises(IntegrityError):
            pairwise_cosine_distance(np.ones((2, 3)))


class TestEps:
    def test_single_pair(self):
        x = np.array([[1.0, 0.0], [0.6, 0.8]])
        for p in (0.1, 50, 99):
            assert compute_eps(x, p) == pytest.approx(0.4, abs=1e-12)

    def test_linear_interpolation(self):
        assert eps_from_distances([0.1, 0.2, 0.3, 0.4], 50) == pytest.approx(0.25, abs=1e-15)

    def test_pairs_counted_once(self):
        # three points: pair distances 1, 1, 2 (a, b orthogonal; c opposite a)
        x = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        assert compute_eps(x, 50) == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            compute_eps(np.array([[1.0, 0.0]]), 10)
        with pytest.raises(DegenerateInputError):
            compute_eps(np.tile([[1.0, 0.0]], (3, 1)), 10)


class TestDBSCAN:
    def test_empty(self):
        res = dbscan(np.zeros((0, 3)), ClusterConfig())
        assert res.n_clusters == 0 and res.labels.size == 0

    def test_identical_points(self):
        res = dbscan(np.tile([[0.0, 1.0]], (5, 1)), ClusterConfig(eps=0.1, min_pts=5))
        assert res.n_clusters == 1 and np.all(res.labels == 0)

    def test_too_sparse_is_noise(self):
        res = dbscan(np.eye(3), ClusterConfig(eps=0.5, min_pts=2))
        assert res.n_clusters == 0 and np.all(res.labels == NOISE)

    def test_neighbourhood_includes_self(self):
        res = dbscan(np.eye(3), ClusterConfig(eps=0.5, min_pts=1))
        assert list(res.labels) == [0, 1, 2]

    def test_boundary_is_inclusive(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert dbscan(x, ClusterConfig(eps=1.0, min_pts=2)).n_clusters == 1

    def test_border_goes_to_first_cluster(self):
        # the point at 9 degrees reaches a core of each group but is not core itself
        angles = np.radians([0, 1, 2, 3, 9, 15, 16, 17, 18])
        x = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        eps = 1 - np.cos(np.radians(6.5))
        labels = dbscan(x, ClusterConfig(eps=eps, min_pts=4)).labels
        assert list(labels) == [0, 0, 0, 0, 0, 1, 1, 1, 1]
        reordered = dbscan(x[::-1], ClusterConfig(eps=eps, min_pts=4)).labels
        assert list(reordered) == [0, 0, 0, 0, 0, 1, 1, 1, 1]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 150))
        x = blob_points(rng, n, int(rng.integers(2, 10)), int(rng.integers(1, 6)), 0.2)
        eps = float(rng.uniform(0.005, 0.2))
        min_pts = int(rng.integers(1, 8))
        ours = dbscan(x, ClusterConfig(eps=eps, min_pts=min_pts)).labels
        assert canonical(ours) == canonical(brute_force_dbscan(x, eps, min_pts))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ClusterConfig(eps=0)
        with pytest.raises(ConfigError):
            ClusterConfig(min_pts=0)
        with pytest.raises(ConfigError):
            ClusterConfig(eps_policy="auto")

    def test_parse_policy(self):
        assert ClusterConfig.parse_policy("p0.1").percentile == 0.1
        assert ClusterConfig.parse_policy("fixed:0.3").eps == 0.3
        assert ClusterConfig.parse_policy("fixed:0.3").describe() == "fixed:0.3"
        for bad in ("q1", "fixed:", "pX"):
            with pytest.raises(ConfigError):
                ClusterConfig.parse_policy(bad)


class TestEstimator:
    def test_fit_predict(self):
        x = blob_points(np.random.default_rng(3), 60, 8, 3, 0.05)
        est = CosineDBSCAN(eps=0.1, min_pts=3)
        labels = est.fit_predict(x)
        assert labels is est.labels_ and est.n_clusters_ == labels.max() + 1
        assert est.eps_ == 0.1

    def test_percentile_policy(self):
        x = blob_points(np.random.default_rng(3), 60, 8, 3, 0.05)
        est = CosineDBSCAN(eps_policy="percentile", percentile=5).fit(x)
        assert est.eps_ == pytest.approx(compute_eps(x, 5))

    def test_params_round_trip(self):
        est = CosineDBSCAN(eps=0.2, min_pts=5)
        assert CosineDBSCAN(**est.get_params()).get_params() == est.get_params()
