"""Synthetic frame embeddings with controllable identity separation.

Each person gets a random unit-norm centre. A frame of that person seen by
camera ``c`` at step ``j`` of its tracklet is embedded as::

    normalize(centre + camera_offset[c] + drift_walk[j] + noise)

``sigma_intra`` is the RMS *norm* of the per-frame noise vector (each
coordinate has std ``sigma_intra / sqrt(dim)``), so that the separation
ratio ``min centre distance / sigma_intra`` means the same thing in any
dimension. Camera offsets have norm ``sigma_camera`` and drift steps RMS norm
``drift``. Every random stream is keyed on (seed, person) / (seed, camera) /
(seed, tracklet), so results do not depend on tracklet order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Dataset
from .exceptions import ConfigError, LabelsRequiredError
from .validation import check_dataset

_CENTRE, _CAMERA, _TRACKLET = 11, 12, 13


def _key(text) -> int:
    return zlib.crc32(str(text).encode("utf-8"))


@dataclass(frozen=True)
class OracleConfig:
    dim: int = 64
    sigma_intra: float = 0.15
    sigma_camera: float = 0.05
    drift: float = 0.01
    seed: int = 0
    separation_ratio: Optional[float] = None

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"oracle dim must be >= 2, got {self.dim}")
        for name in ("sigma_intra", "sigma_camera", "drift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.separation_ratio is not None and self.separation_ratio <= 0:
            raise ConfigError("separation_ratio must be positive")


def person_centre(pid, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _CENTRE, _key(pid)])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def camera_offset(cam, cfg: OracleConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _CAMERA, _key(cam)])
    v = rng.standard_normal(cfg.dim)
    return cfg.sigma_camera * v / np.linalg.norm(v)


def min_centre_distance(pids, dim: int, seed: int) -> float:
    pids = sorted(set(pids))
    if len(pids) < 2:
        return float("inf")
    c = np.stack([person_centre(p, dim, seed) for p in pids])
    g = c @ c.T
    d2 = np.clip(2.0 - 2.0 * g, 0.0, None)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def resolve_sigma(pids, cfg: OracleConfig) -> float:
    """Noise scale actually used: derived from ``separation_ratio`` when set."""
    if cfg.separation_ratio is None:
        return cfg.sigma_intra
    return min_centre_distance(pids, cfg.dim, cfg.seed) / cfg.separation_ratio


def generate_embeddings(ds: Dataset, cfg: OracleConfig) -> np.ndarray:
    """Return an (n_frames, dim) float32 matrix in dataset frame order."""
    check_dataset(ds)
    if not ds.is_labeled:
        raise LabelsRequiredError("the oracle needs gt_pid on every frame")
    if ds.n_frames == 0:
        return np.zeros((0, cfg.dim), dtype=np.float32)
    sigma = resolve_sigma(ds.ids, cfg)
    centres = {p: person_centre(p, cfg.dim, cfg.seed) for p in sorted(ds.ids)}
    cams = {}
    out = np.empty((ds.n_frames, cfg.dim), dtype=np.float64)
    row = 0
    coord_sigma = sigma / np.sqrt(cfg.dim)
    coord_drift = cfg.drift / np.sqrt(cfg.dim)
    for t in ds.tracklets:
        if t.camera_id not in cams:
            cams[t.camera_id] = camera_offset(t.camera_id, cfg)
        rng = np.random.default_rng([cfg.seed, _TRACKLET, _key(t.id)])
        n = len(t)
        noise = rng.standard_normal((n, cfg.dim)) * coord_sigma
        steps = rng.standard_normal((n, cfg.dim)) * coord_drift
        steps[0] = 0.0
        walk = np.cumsum(steps, axis=0)
        base = np.stack([centres[p] for p in t.pids])
        out[row : row + n] = base + cams[t.camera_id] + walk + noise
        row += n
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.astype(np.float32)


def separation_report(ds: Dataset, cfg: OracleConfig) -> dict:
    sigma = resolve_sigma(ds.ids, cfg)
    dmin = min_centre_distance(ds.ids, cfg.dim, cfg.seed)
    return {
        "dim": cfg.dim,
        "sigma_intra": sigma,
        "sigma_camera": cfg.sigma_camera,
        "drift": cfg.drift,
        "min_centre_distance": dmin,
        "separation_ratio": dmin / sigma if sigma > 0 else float("inf"),
    }


class EmbeddingOracle(BaseEstimator, TransformerMixin):
    """Transformer that attaches oracle embeddings to every frame of a Dataset."""

    def __init__(self, dim=64, sigma_intra=0.15, sigma_camera=0.05, drift=0.01, seed=0, separation_ratio=None):
        self.dim = dim
        self.sigma_intra = sigma_intra
        self.sigma_camera = sigma_camera
        self.drift = drift
        self.seed = seed
        self.separation_ratio = separation_ratio

    def config(self) -> OracleConfig:
        return OracleConfig(
            dim=self.dim,
            sigma_intra=self.sigma_intra,
            sigma_camera=self.sigma_camera,
            drift=self.drift,
            seed=self.seed,
            separation_ratio=self.separation_ratio,
        )

    def fit(self, ds, y=None):
        self.report_ = separation_report(ds, self.config())
        return self

    def transform(self, ds: Dataset) -> Dataset:
        return ds.with_embeddings(generate_embeddings(ds, self.config()))
