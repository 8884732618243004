"""Retrieval metrics (mAP, CMC) and pseudo-label cluster quality."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Sequence

import numpy as np

from .exceptions import IntegrityError, TrackmillError
from .validation import check_embeddings

NOISE = -1


class UndefinedQueryError(TrackmillError, ValueError):
    """A query has no relevant gallery item, so its AP is undefined."""


class UndefinedPurityError(TrackmillError, ValueError):
    """Every tracklet is noise, so purity has no denominator."""

    def __init__(self, noise_fraction):
        self.noise_fraction = noise_fraction
        super().__init__("every tracklet is noise; purity is undefined")


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    """Mean of precision@k over the ranks k that hold a relevant item.

    Summed in exact rationals and rounded once, so e.g. hits at ranks 1
    and 3 give exactly ``5 / 6``.
    """
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise UndefinedQueryError("no relevant item in ranking")
    total = sum(Fraction(i, int(k) + 1) for i, k in enumerate(hits, start=1))
    return float(total / hits.size)


@dataclass
class RetrievalResult:
    mAP: float
    cmc: Dict[int, float]
    n_queries: int
    skipped: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(r): v for r, v in self.cmc.items()},
            "n_queries": self.n_queries,
            "skipped": self.skipped,
        }


def evaluate_retrieval(
    query_features,
    query_labels,
    query_cameras,
    gallery_features,
    gallery_labels,
    gallery_cameras,
    ranks=(1, 5, 10, 20),
) -> RetrievalResult:
    """Rank the gallery by cosine similarity for every query.

    Gallery items sharing both identity and camera with the query are
    removed before ranking. Queries left without any correct match are
    skipped and counted in ``skipped``. Similarity ties keep gallery order.
    """
    qf = check_embeddings(query_features, unit_norm=True).astype(np.float64)
    gf = check_embeddings(gallery_features, unit_norm=True).astype(np.float64)
    ql, qc = np.asarray(query_labels), np.asarray(query_cameras)
    gl, gc = np.asarray(gallery_labels), np.asarray(gallery_cameras)
    ranks = sorted(int(r) for r in ranks)
    sim = qf @ gf.T
    hits_at = np.zeros(len(ranks))
    aps = []
    skipped = 0
    for i in range(qf.shape[0]):
        keep = ~((gl == ql[i]) & (gc == qc[i]))
        order = np.argsort(-sim[i][keep], kind="stable")
        rel = (gl[keep] == ql[i])[order]
        if not rel.any():
            skipped += 1
            continue
        aps.append(average_precision(rel))
        first = int(np.argmax(rel)) + 1
        hits_at += np.array([first <= r for r in ranks])
    n = len(aps)
    return RetrievalResult(
        mAP=float(np.mean(aps)) if n else 0.0,
        cmc={r: (float(h / n) if n else 0.0) for r, h in zip(ranks, hits_at)},
        n_queries=n,
        skipped=skipped,
    )


@dataclass(frozen=True)
class ClusterQuality:
    purity: float
    n_clusters: int
    noise_fraction: float


def cluster_quality(pseudo, truth) -> ClusterQuality:
    """Purity of a pseudo labelling against ground truth.

    Args:
        pseudo: a :class:`~trackmill.association.PseudoLabeling` or a mapping
            tracklet id -> cluster (``-1`` for noise).
        truth: mapping tracklet id -> ground-truth identity, or tracklet id ->
            sequence of per-frame identities. In the second form every frame
            is a cluster member, so frames of a mixed tracklet that disagree
            with the cluster majority count against purity.

    Purity is the share of assigned (non-noise) members that carry their
    cluster's majority identity. ``noise_fraction`` is always counted in
    tracklets. Raises :class:`UndefinedPurityError` when nothing is assigned.
    """
    mapping = pseudo.tracklet_to_label if hasattr(pseudo, "tracklet_to_label") else dict(pseudo)
    if not mapping:
        raise IntegrityError("empty pseudo labelling")
    members = defaultdict(Counter)
    n_noise = 0
    for tid, label in mapping.items():
        if label == NOISE:
            n_noise += 1
            continue
        gt = truth[tid]
        if isinstance(gt, (list, tuple, np.ndarray)):
            members[label].update(gt)
        else:
            members[label][gt] += 1
    noise_fraction = n_noise / len(mapping)
    if not members:
        raise UndefinedPurityError(noise_fraction)
    assigned = sum(sum(c.values()) for c in members.values())
    top = sum(max(c.values()) for c in members.values())
    return ClusterQuality(top / assigned, len(members), noise_fraction)
