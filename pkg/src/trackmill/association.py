"""Inter-tracklet association: pooled tracklet features -> hard pseudo labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .clustering import (
    DEFAULT_MIN_PTS,
    DEFAULT_PERCENTILE,
    MIN_EPS,
    NOISE,
    ClusterConfig,
    dbscan_precomputed,
    eps_from_distances,
    pairwise_cosine_distance,
)
from .core import Dataset
from .exceptions import ConfigError, DegenerateInputError, IntegrityError
from .validation import check_dataset, l2_normalize

DEFAULT_WINDOW = 32

Extractor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PseudoLabeling:
    """Cluster index per tracklet (``-1`` = DBSCAN noise) for one epoch."""

    tracklet_ids: tuple
    labels: np.ndarray
    n_classes: int
    epoch: int = 0
    eps: Optional[float] = None

    @property
    def tracklet_to_label(self) -> dict:
        return {t: int(l) for t, l in zip(self.tracklet_ids, self.labels)}

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "n_classes": self.n_classes,
            "eps": self.eps,
            "n_noise": self.n_noise,
            "labels": self.tracklet_to_label,
        }

    @classmethod
    def from_dict(cls, obj) -> "PseudoLabeling":
        ids = tuple(obj["labels"].keys())
        labels = np.array([obj["labels"][t] for t in ids], dtype=np.int64)
        return cls(ids, labels, int(obj["n_classes"]), int(obj.get("epoch", 0)), obj.get("eps"))


def sample_consecutive(t, n: int = DEFAULT_WINDOW, seed=0) -> np.ndarray:
    """Indices of ``n`` consecutive frames from a tracklet (or a tracklet length).

    Short tracklets are repeated cyclically up to ``n``.
    """
    length = t if isinstance(t, (int, np.integer)) else len(t)
    if n < 1:
        raise ConfigError(f"window length must be >= 1, got {n}")
    if length < 1:
        raise IntegrityError("cannot sample from an empty tracklet")
    if length < n:
        return np.arange(n) % length
    start = int(np.random.default_rng(seed).integers(0, length - n + 1))
    return np.arange(start, start + n)


def tracklet_feature(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise IntegrityError("tracklet_feature needs a non-empty (n, d) matrix")
    mean = frames.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DegenerateInputError("frame features cancel out; pooled feature has zero norm")
    return mean / norm


def sample_windows(ds: Dataset, n: int, seed: int, epoch: int) -> np.ndarray:
    """(N, n) matrix of global frame-row indices, one window per tracklet."""
    offsets = ds.offsets
    rows = np.empty((ds.n_tracklets, n), dtype=np.int64)
    for i, t in enumerate(ds.tracklets):
        rows[i] = offsets[i] + sample_consecutive(len(t), n, seed=[seed, epoch, i])
    return rows


def pool_features(raw: np.ndarray, windows: np.ndarray, extractor: Optional[Extractor] = None):
    """Extract per-frame features for every window and average-pool each one."""
    n_trk, n = windows.shape
    flat = raw[windows.reshape(-1)]
    feats = flat if extractor is None else extractor(flat)
    feats = l2_normalize(feats).reshape(n_trk, n, -1)
    return l2_normalize(feats.mean(axis=1))


def cluster_tracklets(features, cfg: ClusterConfig):
    dist = pairwise_cosine_distance(features)
    if cfg.eps_policy == "fixed":
        eps = cfg.eps
    else:
        iu = np.triu_indices(dist.shape[0], k=1)
        eps = min(2.0, max(eps_from_distances(dist[iu], cfg.percentile), MIN_EPS))
    labels = dbscan_precomputed(dist, eps, cfg.min_pts)
    return labels, int(labels.max()) + 1, eps


def associate(
    ds: Dataset,
    extractor: Optional[Extractor] = None,
    cfg: Optional[ClusterConfig] = None,
    n: int = DEFAULT_WINDOW,
    seed: int = 0,
    epoch: int = 0,
    raw: Optional[np.ndarray] = None,
) -> PseudoLabeling:
    """Pool a window of ``n`` frames per tracklet and cluster the pooled features.

    Args:
        ds: tracklets with frame embeddings (the raw input to ``extractor``).
        extractor: maps an (m, d_raw) block of raw frame features to (m, d);
            identity when omitted.
        cfg: clustering config; defaults to the percentile eps policy.
        n: window length.
        seed, epoch: both folded into the window sampling seed.
        raw: precomputed ``ds.embedding_matrix()`` (avoids re-stacking).
    """
    check_dataset(ds)
    cfg = cfg or ClusterConfig(eps_policy="percentile", percentile=DEFAULT_PERCENTILE)
    if ds.n_tracklets == 0:
        return PseudoLabeling((), np.zeros(0, dtype=np.int64), 0, epoch, None)
    if raw is None:
        raw = ds.embedding_matrix()
    features = pool_features(raw, sample_windows(ds, n, seed, epoch), extractor)
    if ds.n_tracklets == 1:
        # a single point has no pairwise distances; it is its own cluster iff min_pts allows
        labels = np.array([0 if cfg.min_pts <= 1 else NOISE])
        return PseudoLabeling(
            (ds.tracklets[0].id,), labels, int(labels.max()) + 1, epoch, None
        )
    labels, k, eps = cluster_tracklets(features, cfg)
    return PseudoLabeling(tuple(t.id for t in ds.tracklets), labels, k, epoch, eps)


class TrackletAssociator(BaseEstimator, ClusterMixin):
    """Cluster whole tracklets; ``labels_`` holds one pseudo label per tracklet.

    ``eps_policy`` follows the CLI syntax: ``"p0.1"`` for the 0.1th percentile
    of pairwise distances, ``"fixed:0.3"`` for a fixed radius.
    """

    def __init__(self, eps_policy="p0.1", min_pts=DEFAULT_MIN_PTS, n_frames=DEFAULT_WINDOW, seed=0, extractor=None):
        self.eps_policy = eps_policy
        self.min_pts = min_pts
        self.n_frames = n_frames
        self.seed = seed
        self.extractor = extractor

    def fit(self, ds: Dataset, y=None, epoch: int = 0):
        cfg = ClusterConfig.parse_policy(self.eps_policy, self.min_pts)
        self.labeling_ = associate(ds, self.extractor, cfg, self.n_frames, self.seed, epoch)
        self.labels_ = self.labeling_.labels
        self.n_clusters_ = self.labeling_.n_classes
        self.eps_ = self.labeling_.eps
        return self
