import numpy as np
import pytest

from conftest import unit_rows
from reference import brute_force_retrieval
from trackmill.evaluation import (
    UndefinedPurityError,
    UndefinedQueryError,
    average_precision,
    cluster_quality,
    evaluate_retrieval,
)
from trackmill.exceptions import IntegrityError


def random_instance(rng, n_q=None, n_g=None, d=8, n_ids=5, n_cams=3):
    n_q = n_q or int(rng.integers(1, 15))
    n_g = n_g or int(rng.integers(1, 35))
    return (
        unit_rows(rng, n_q, d), rng.integers(0, n_ids, n_q), rng.integers(0, n_cams, n_q),
        unit_rows(rng, n_g, d), rng.integers(0, n_ids, n_g), rng.integers(0, n_cams, n_g),
    )


class TestAveragePrecision:
    def test_hits_at_one_and_three(self):
        assert average_precision([1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)

    def test_perfect_and_last(self):
        assert average_precision([1, 1, 0]) == 1.0
        assert average_precision([0, 0, 0, 1]) == 0.25

    def test_no_relevant(self):
        with pytest.raises(UndefinedQueryError):
            average_precision([0, 0])


class TestRetrieval:
    def test_duplicate_gallery_gives_perfect_scores(self):
        rng = np.random.default_rng(0)
        f = unit_rows(rng, 6, 8)
        labels = np.arange(6)
        res = evaluate_retrieval(f, labels, np.zeros(6), f, labels, np.ones(6), ranks=(1, 5))
        assert res.mAP == 1.0 and res.cmc == {1: 1.0, 5: 1.0}

    def test_same_camera_matches_removed(self):
        f = np.eye(3)
        res = evaluate_retrieval(
            f[:1], [0], [0], f, [0, 0, 1], [0, 1, 0], ranks=(1,)
        )
        # only the cross-camera copy (index 1) counts; it sits at rank 1 after removal
        assert res.n_queries == 1 and res.mAP == 1.0

    def test_query_without_match_is_skipped(self):
        f = np.eye(3)
        res = evaluate_retrieval(f[:2], [0, 7], [0, 0], f, [0, 1, 2], [1, 1, 1], ranks=(1,))
        assert res.skipped == 1 and res.n_queries == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        args = random_instance(rng)
        ranks = (1, 3, 5)
        res = evaluate_retrieval(*args, ranks=ranks)
        try:
            ref_map, ref_cmc, skipped = brute_force_retrieval(*args, ranks)
        except ZeroDivisionError:
            assert res.n_queries == 0
            return
        assert res.mAP == pytest.approx(ref_map, abs=1e-9)
        for r in ranks:
            assert res.cmc[r] == pytest.approx(ref_cmc[r], abs=1e-9)
        assert res.skipped == skipped

    def test_cmc_monotone(self):
        rng = np.random.default_rng(3)
        res = evaluate_retrieval(*random_instance(rng, 20, 40), ranks=(1, 2, 5, 10, 40))
        values = [res.cmc[r] for r in sorted(res.cmc)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        qf, ql, qc, gf, gl, gc = random_instance(rng, 10, 30)
        rot, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        a = evaluate_retrieval(qf, ql, qc, gf, gl, gc)
        b = evaluate_retrieval(qf @ rot, ql, qc, gf @ rot, gl, gc)
        assert a.mAP == pytest.approx(b.mAP, abs=1e-12)

    def test_rejects_unnormalised(self):
        f = np.ones((2, 3))
        with pytest.raises(IntegrityError):
            evaluate_retrieval(f, [0, 1], [0, 0], f, [0, 1], [1, 1])

    def test_to_dict_keys(self):
        f = np.eye(2)
        d = evaluate_retrieval(f, [0, 1], [0, 0], f, [0, 1], [1, 1], ranks=(1,)).to_dict()
        assert d == {"mAP": 1.0, "cmc": {"1": 1.0}, "n_queries": 2, "skipped": 0}


class TestClusterQuality:
    def test_pure_clusters(self):
        q = cluster_quality({"a": 0, "b": 0, "c": 1}, {"a": 5, "b": 5, "c": 6})
        assert q.purity == 1.0 and q.n_clusters == 2 and q.noise_fraction == 0.0

    def test_mixed_cluster_and_noise(self):
        q = cluster_quality({"a": 0, "b": 0, "c": 0, "d": -1}, {"a": 1, "b": 1, "c": 2, "d": 3})
        assert q.purity == pytest.approx(2 / 3)
        assert q.noise_fraction == 0.25

    def test_frame_level_truth(self):
        # one tracklet holds frames of two people; the minority frames count against purity
        q = cluster_quality({"a": 0, "b": 0}, {"a": [1, 1, 1], "b": [1, 2]})
        assert q.purity == pytest.approx(4 / 5)

    def test_all_noise(self):
        with pytest.raises(UndefinedPurityError) as info:
            cluster_quality({"a": -1}, {"a": 1})
        assert info.value.noise_fraction == 1.0

    def test_empty(self):
        with pytest.raises(IntegrityError):
            cluster_quality({}, {})
