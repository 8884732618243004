"""DBSCAN over unit-norm embeddings with cosine distance."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .exceptions import ConfigError, DegenerateInputError
from .validation import check_embeddings

NOISE = -1
DEFAULT_MIN_PTS = 4
DEFAULT_PERCENTILE = 0.1
MIN_EPS = 1e-9


@dataclass(frozen=True)
class ClusterConfig:
    """DBSCAN settings.

    ``eps_policy`` is ``"fixed"`` (use ``eps``) or ``"percentile"`` (derive
    eps from the ``percentile``-th percentile of pairwise distances).
    """

    eps: float = 0.6
    min_pts: int = DEFAULT_MIN_PTS
    eps_policy: str = "fixed"
    percentile: float = DEFAULT_PERCENTILE

    def __post_init__(self):
        if self.eps_policy not in ("fixed", "percentile"):
            raise ConfigError(f"unknown eps_policy {self.eps_policy!r}")
        if not 0 < self.eps <= 2:
            raise ConfigError(f"eps must lie in (0, 2], got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")
        if not 0 < self.percentile < 100:
            raise ConfigError(f"percentile must lie in (0, 100), got {self.percentile}")

    @classmethod
    def parse_policy(cls, text: str, min_pts: int = DEFAULT_MIN_PTS) -> "ClusterConfig":
        """Parse the CLI form ``pN`` (percentile N) or ``fixed:V``."""
        try:
            if text.startswith("fixed:"):
                return cls(eps=float(text[6:]), min_pts=min_pts, eps_policy="fixed")
            if text.startswith("p"):
                return cls(min_pts=min_pts, eps_policy="percentile", percentile=float(text[1:]))
        except ValueError as exc:
            raise ConfigError(f"bad eps policy {text!r}") from exc
        raise ConfigError(f"bad eps policy {text!r}; expected pN or fixed:V")

    def describe(self) -> str:
        if self.eps_policy == "fixed":
            return f"fixed:{self.eps:g}"
        return f"p{self.percentile:g}"


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int
    eps: float

    @property
    def noise_mask(self) -> np.ndarray:
        return self.labels == NOISE


def pairwise_cosine_distance(x) -> np.ndarray:
    """``1 - <x_i, x_j>`` for unit-norm rows, symmetric with an exact zero diagonal."""
    x = check_embeddings(x, unit_norm=True).astype(np.float64)
    d = 1.0 - x @ x.T
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    np.clip(d, 0.0, 2.0, out=d)
    return d


def eps_from_distances(distances, percentile: float) -> float:
    """Linear-interpolation percentile of a multiset of pairwise distances."""
    distances = np.asarray(distances, dtype=np.float64).ravel()
    if distances.size == 0:
        raise DegenerateInputError("need at least one pairwise distance")
    if np.all(distances <= 0):
        raise DegenerateInputError("all points coincide; eps is undefined")
    return float(np.percentile(distances, percentile))


def compute_eps(x, percentile: float = DEFAULT_PERCENTILE) -> float:
    """Data-dependent eps: a low percentile of the off-diagonal distance distribution.

    Each unordered pair is counted once.
    """
    x = check_embeddings(x, unit_norm=True)
    if x.shape[0] < 2:
        raise DegenerateInputError("compute_eps needs at least two points")
    d = pairwise_cosine_distance(x)
    iu = np.triu_indices(x.shape[0], k=1)
    return eps_from_distances(d[iu], percentile)


def dbscan_precomputed(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN on a distance matrix.

    Neighbourhoods are ``d <= eps`` and include the point itself. Points are
    visited in input order; a border point belongs to the first cluster
    that reaches it.
    """
    n = dist.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    adj = dist <= eps
    neighbors = [np.flatnonzero(row) for row in adj]
    core = np.array([nb.size >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def dbscan(x, cfg: ClusterConfig) -> ClusterAssignment:
    """Cluster the rows of ``x``; ``cfg.eps`` is used as given."""
    x = np.asarray(x)
    if x.size == 0:
        return ClusterAssignment(np.zeros(0, dtype=np.int64), 0, cfg.eps)
    labels = dbscan_precomputed(pairwise_cosine_distance(x), cfg.eps, cfg.min_pts)
    return ClusterAssignment(labels, int(labels.max()) + 1, cfg.eps)


def resolve_eps(x, cfg: ClusterConfig) -> float:
    """Radius for ``x`` under ``cfg``'s policy, floored so it stays a valid config."""
    if cfg.eps_policy == "fixed":
        return cfg.eps
    return min(2.0, max(compute_eps(x, cfg.percentile), MIN_EPS))


class CosineDBSCAN(BaseEstimator, ClusterMixin):
    """sklearn-compatible cosine DBSCAN with an optional data-dependent eps.

    Parameters
    ----------
    eps : float, default=0.6
        Neighbourhood radius in cosine distance; ignored when
        ``eps_policy="percentile"``.
    min_pts : int, default=4
    eps_policy : {"fixed", "percentile"}
    percentile : float, default=0.1
        Percentile of pairwise distances used as eps by the percentile policy.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster index per sample, ``-1`` for noise.
    n_clusters_ : int
    eps_ : float
        The radius actually used.
    """

    def __init__(self, eps=0.6, min_pts=DEFAULT_MIN_PTS, eps_policy="fixed", percentile=DEFAULT_PERCENTILE):
        self.eps = eps
        self.min_pts = min_pts
        self.eps_policy = eps_policy
        self.percentile = percentile

    def _config(self) -> ClusterConfig:
        return ClusterConfig(
            eps=self.eps, min_pts=self.min_pts, eps_policy=self.eps_policy, percentile=self.percentile
        )

    def fit(self, X, y=None):
        cfg = self._config()
        X = check_embeddings(X, unit_norm=True, allow_empty=True)
        eps = resolve_eps(X, cfg) if X.shape[0] else cfg.eps
        result = dbscan(X, ClusterConfig(eps=eps, min_pts=cfg.min_pts))
        self.labels_ = result.labels
        self.n_clusters_ = result.n_clusters
        self.eps_ = eps
        return self
