import numpy as np
import pytest

from trackmill.association import (
    PseudoLabeling,
    TrackletAssociator,
    associate,
    sample_consecutive,
    tracklet_feature,
)
from trackmill.clustering import NOISE, ClusterConfig
from trackmill.core import Dataset, make_tracklet
from trackmill.evaluation import cluster_quality
from trackmill.exceptions import ConfigError, DegenerateInputError
from trackmill.noise import majority_labels
from trackmill.oracle import OracleConfig, generate_embeddings
from trackmill.simulator import make_clean_dataset


class TestSampling:
    def test_long_tracklet(self):
        for seed in range(50):
            idx = sample_consecutive(50, 32, seed)
            assert len(idx) == 32 and 0 <= idx[0] <= 18
            assert np.all(np.diff(idx) == 1)

    def test_cyclic_padding(self):
        expected = list(range(10)) * 3 + [0, 1]
        assert list(sample_consecutive(10, 32, 0)) == expected

    def test_accepts_tracklet(self):
        t = make_tracklet("a", 0, [1] * 40)
        np.testing.assert_array_equal(sample_consecutive(t, 32, 5), sample_consecutive(40, 32, 5))

    def test_replay(self):
        assert list(sample_consecutive(100, 32, 7)) == list(sample_consecutive(100, 32, 7))

    def test_bad_window(self):
        with pytest.raises(ConfigError):
            sample_consecutive(10, 0)


class TestFeature:
    def test_single_frame(self):
        v = np.array([[0.6, 0.8]])
        np.testing.assert_array_equal(tracklet_feature(v), v[0])

    def test_identical_frames(self):
        v = np.array([[0.6, 0.8], [0.6, 0.8]])
        np.testing.assert_allclose(tracklet_feature(v), [0.6, 0.8], atol=1e-15)

    def test_matches_naive(self):
        x = np.random.default_rng(0).standard_normal((32, 16))
        mean = [sum(col) / 32 for col in x.T]
        norm = sum(m * m for m in mean) ** 0.5
        np.testing.assert_allclose(tracklet_feature(x), [m / norm for m in mean], atol=1e-7)

    def test_cancelling_frames(self):
        with pytest.raises(DegenerateInputError):
            tracklet_feature(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def oracle_clean(n_ids=15, sigma=0.05, seed=0):
    ds = make_clean_dataset(n_ids, 3, (20, 40), (2, 3), seed=seed)
    return ds.with_embeddings(generate_embeddings(ds, OracleConfig(sigma_intra=sigma, sigma_camera=0.0, seed=seed)))


class TestAssociate:
    def test_recovers_identities(self):
        ds = oracle_clean()
        pseudo = associate(ds, cfg=ClusterConfig(eps=0.1, min_pts=2))
        assert pseudo.n_classes == len(ds.ids)
        q = cluster_quality(pseudo, majority_labels(ds))
        assert q.purity == 1.0 and q.noise_fraction == 0.0

    def test_fragments_merge(self):
        ds = oracle_clean(n_ids=2)
        p0 = ds.tracklets[0].pids[0]
        frags = [t for t in ds.tracklets if t.pids[0] == p0]
        labels = associate(ds, cfg=ClusterConfig(eps=0.1, min_pts=1)).tracklet_to_label
        assert len({labels[t.id] for t in frags}) == 1

    def test_single_tracklet(self):
        ds = oracle_clean(n_ids=1)
        one = Dataset(ds.tracklets[:1])
        assert associate(one, cfg=ClusterConfig(min_pts=1)).labels.tolist() == [0]
        assert associate(one, cfg=ClusterConfig(min_pts=2)).labels.tolist() == [NOISE]

    def test_empty(self):
        assert associate(Dataset(())).n_classes == 0

    def test_deterministic(self):
        ds = oracle_clean()
        a = associate(ds, cfg=ClusterConfig(eps=0.1, min_pts=2), epoch=0)
        b = associate(ds, cfg=ClusterConfig(eps=0.1, min_pts=2), epoch=0)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_extractor_applied(self):
        ds = oracle_clean()
        calls = []

        def extractor(x):
            calls.append(x.shape)
            return x

        associate(ds, extractor, ClusterConfig(eps=0.1, min_pts=2), n=8)
        assert calls == [(8 * ds.n_tracklets, ds.embedding_dim)]

    def test_percentile_eps_reported(self):
        pseudo = associate(oracle_clean(), cfg=ClusterConfig(eps_policy="percentile", percentile=5))
        assert pseudo.eps is not None and 0 < pseudo.eps < 2

    def test_labeling_round_trip(self):
        pseudo = associate(oracle_clean(), cfg=ClusterConfig(eps=0.1, min_pts=2), epoch=3)
        back = PseudoLabeling.from_dict(pseudo.to_dict())
        assert back.tracklet_to_label == pseudo.tracklet_to_label
        assert (back.n_classes, back.epoch) == (pseudo.n_classes, 3)


def test_estimator():
    ds = oracle_clean()
    est = TrackletAssociator(eps_policy="fixed:0.1", min_pts=2)
    labels = est.fit(ds).labels_
    assert est.n_clusters_ == len(ds.ids) and len(labels) == ds.n_tracklets
    assert est.eps_ == 0.1
