"""Intra-tracklet isolation: split tracklets into per-identity sub-tracklets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .clustering import DEFAULT_MIN_PTS, NOISE, ClusterConfig, dbscan
from .core import Dataset, Tracklet
from .exceptions import IntegrityError
from .noise import noise_profiles, noise_ratio
from .validation import check_dataset, l2_normalize

DEFAULT_EPS_INTRA = 0.6


@dataclass
class IsolationReport:
    eps: float
    min_pts: int
    n_input: int
    n_output: int
    n_split: int
    bypassed: List[str] = field(default_factory=list)
    noise_frames: int = 0
    noise_pct: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "min_pts": self.min_pts,
            "n_input_tracklets": self.n_input,
            "n_clusters": self.n_output,
            "n_split": self.n_split,
            "n_bypassed": len(self.bypassed),
            "bypassed": list(self.bypassed),
            "noise_frames_attached": self.noise_frames,
            "noise_pct": self.noise_pct,
        }


def _attach_noise(labels: np.ndarray) -> np.ndarray:
    """Give each NOISE position the cluster whose seq span is nearest (ties: lowest id)."""
    out = labels.copy()
    clusters = np.unique(labels[labels != NOISE])
    spans = [(np.flatnonzero(labels == c)) for c in clusters]
    lo = np.array([s.min() for s in spans])
    hi = np.array([s.max() for s in spans])
    for i in np.flatnonzero(labels == NOISE):
        dist = np.maximum(0, np.maximum(lo - i, i - hi))
        out[i] = clusters[int(np.argmin(dist))]
    return out


def split_tracklet(t: Tracklet, features: np.ndarray, cfg: ClusterConfig):
    """Return ``(sub_tracklets, bypassed, n_noise_frames)`` for one tracklet."""
    if len(t) < cfg.min_pts:
        return [t], True, 0
    labels = dbscan(features, cfg).labels
    if np.all(labels == NOISE):
        return [t], False, 0
    n_noise = int(np.sum(labels == NOISE))
    labels = _attach_noise(labels)
    clusters = np.unique(labels)
    if clusters.size == 1:
        return [t], False, n_noise
    # number outputs by first appearance so the earliest segment gets /0
    first = sorted(clusters, key=lambda c: np.flatnonzero(labels == c)[0])
    subs = []
    for k, c in enumerate(first):
        idx = np.flatnonzero(labels == c)
        subs.append(Tracklet.from_frames(f"{t.id}/{k}", t.camera_id, [t.frames[i] for i in idx]))
    return subs, False, n_noise


def isolate_tracklets(
    ds: Dataset, features=None, cfg: Optional[ClusterConfig] = None, return_report: bool = False
):
    """Split every tracklet of ``ds`` by clustering its frame features.

    Args:
        ds: input tracklets.
        features: (n_frames, d) matrix in dataset frame order; defaults to the
            frames' own embeddings. Rows are L2-normalised before clustering.
        cfg: fixed-eps cluster config (default eps 0.6, min_pts 4).

    Returns:
        The isolated dataset, plus an :class:`IsolationReport` when
        ``return_report`` is set. An unsplit tracklet keeps its id;
        pieces of a split one are named ``<id>/<k>``. Frames keep their
        chronological order and are renumbered from 0.
    """
    check_dataset(ds)
    cfg = cfg or ClusterConfig(eps=DEFAULT_EPS_INTRA, min_pts=DEFAULT_MIN_PTS)
    if cfg.eps_policy != "fixed":
        raise IntegrityError("isolation uses a fixed eps so every tracklet is cut by the same rule")
    if features is None:
        features = ds.embedding_matrix()
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != ds.n_frames:
        raise IntegrityError(
            f"{ds.n_frames} frames but feature matrix has shape {features.shape}"
        )
    if features.shape[0]:
        features = l2_normalize(features)
    offsets = ds.offsets
    out = []
    bypassed = []
    n_split = 0
    n_noise = 0
    for i, t in enumerate(ds.tracklets):
        subs, was_bypassed, noise = split_tracklet(t, features[offsets[i] : offsets[i + 1]], cfg)
        out.extend(subs)
        n_noise += noise
        if was_bypassed:
            bypassed.append(t.id)
        if len(subs) > 1:
            n_split += 1
    result = Dataset(tuple(out))
    report = IsolationReport(
        eps=cfg.eps,
        min_pts=cfg.min_pts,
        n_input=ds.n_tracklets,
        n_output=result.n_tracklets,
        n_split=n_split,
        bypassed=bypassed,
        noise_frames=n_noise,
    )
    if result.is_labeled and result.n_tracklets:
        report.noise_pct = noise_ratio(noise_profiles(result))
    if return_report:
        return result, report
    return result


class TrackletIsolator(BaseEstimator, TransformerMixin):
    """Transformer form of :func:`isolate_tracklets` (stateless; ``fit`` is a no-op)."""

    def __init__(self, eps=DEFAULT_EPS_INTRA, min_pts=DEFAULT_MIN_PTS):
        self.eps = eps
        self.min_pts = min_pts

    def fit(self, ds=None, y=None):
        return self

    def transform(self, ds: Dataset, features=None) -> Dataset:
        out, self.report_ = isolate_tracklets(
            ds, features, ClusterConfig(eps=self.eps, min_pts=self.min_pts), return_report=True
        )
        return out
