"""Hard/soft identity and triplet losses with analytic gradients.

All functions return ``(value, gradient)`` where the gradient is taken with
respect to the *net* branch (``features_net`` or ``logits_net``); the
mean-net branch is a constant target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .exceptions import ConfigError, IntegrityError, MiningError


@dataclass(frozen=True)
class Batch:
    features_net: np.ndarray
    logits_net: np.ndarray
    features_mean: np.ndarray
    logits_mean: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        for name in ("features_net", "logits_net", "features_mean", "logits_mean"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise IntegrityError(f"{name} has {arr.shape[0]} rows, batch has {n} labels")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    lambda_id: float = 0.5
    lambda_tri: float = 0.8

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("triplet margin must be >= 0")
        for name in ("lambda_id", "lambda_tri"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


class Gradients(NamedTuple):
    features: np.ndarray
    logits: np.ndarray


class Mining(NamedTuple):
    pos: np.ndarray
    neg: np.ndarray
    d_pos: np.ndarray
    d_neg: np.ndarray


def euclidean_distances(f: np.ndarray) -> np.ndarray:
    diff = f[:, None, :] - f[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mine_hardest(features, labels) -> Mining:
    """Farthest positive and closest negative per anchor (ties: lowest index)."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    d = euclidean_distances(f)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    for i in range(n):
        if not pos_mask[i].any():
            raise MiningError(f"anchor {i} (label {labels[i]}) has no positive in the batch")
        if not neg_mask[i].any():
            raise MiningError(f"anchor {i} (label {labels[i]}) has no negative in the batch")
    pos = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, d, np.inf), axis=1)
    idx = np.arange(n)
    return Mining(pos, neg, d[idx, pos], d[idx, neg])


def _unit_diff(f, i_idx, j_idx, dist):
    """(f_i - f_j) / ||f_i - f_j|| row-wise, zero where the distance is zero."""
    diff = f[i_idx] - f[j_idx]
    safe = np.where(dist > 0, dist, 1.0)
    return np.where((dist > 0)[:, None], diff / safe[:, None], 0.0)


def _scatter_distance_grad(f, coeff_pos, coeff_neg, mining: Mining) -> np.ndarray:
    """Gradient of sum_i (coeff_pos_i * d(i, p_i) + coeff_neg_i * d(i, n_i))."""
    n = f.shape[0]
    idx = np.arange(n)
    up = _unit_diff(f, idx, mining.pos, mining.d_pos) * coeff_pos[:, None]
    un = _unit_diff(f, idx, mining.neg, mining.d_neg) * coeff_neg[:, None]
    grad = up + un
    np.add.at(grad, mining.pos, -up)
    np.add.at(grad, mining.neg, -un)
    return grad


def hard_id_loss(b: Batch):
    z = np.asarray(b.logits_net, dtype=np.float64)
    y = np.asarray(b.labels)
    n, k = z.shape
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    logp = log_softmax(z, axis=1)
    value = -np.mean(logp[np.arange(n), y])
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(value), grad / n


def soft_id_loss(b: Batch):
    z = np.asarray(b.logits_net, dtype=np.float64)
    zm = np.asarray(b.logits_mean, dtype=np.float64)
    if z.shape != zm.shape:
        raise IntegrityError(f"net logits {z.shape} and mean-net logits {zm.shape} differ")
    n = z.shape[0]
    q = softmax(zm, axis=1)
    logp = log_softmax(z, axis=1)
    value = -np.sum(q * logp) / n
    return float(value), (np.exp(logp) - q) / n


def hard_triplet_loss(b: Batch, margin: float = 0.5, mining: Mining = None):
    f = np.asarray(b.features_net, dtype=np.float64)
    if mining is None:
        mining = mine_hardest(f, b.labels)
    n = f.shape[0]
    hinge = mining.d_pos + margin - mining.d_neg
    active = (hinge > 0).astype(np.float64)
    value = np.sum(np.maximum(hinge, 0.0)) / n
    grad = _scatter_distance_grad(f, active / n, -active / n, mining)
    return float(value), grad


def soft_triplet_probability(d_pos, d_neg) -> np.ndarray:
    """exp(d_neg) / (exp(d_pos) + exp(d_neg)), evaluated stably."""
    return expit(d_neg - d_pos)


def soft_triplet_loss(b: Batch, mining: Mining = None):
    """Binary cross-entropy between net and mean-net soft triplet scores.

    Hardest pairs are mined on the net features and reused on the mean-net
    side.
    """
    f = np.asarray(b.features_net, dtype=np.float64)
    fm = np.asarray(b.features_mean, dtype=np.float64)
    if f.shape != fm.shape:
        raise IntegrityError(f"net features {f.shape} and mean-net features {fm.shape} differ")
    if mining is None:
        mining = mine_hardest(f, b.labels)
    n = f.shape[0]
    s = mining.d_neg - mining.d_pos
    target = soft_triplet_probability(
        np.linalg.norm(fm - fm[mining.pos], axis=1), np.linalg.norm(fm - fm[mining.neg], axis=1)
    )
    # -[t log T + (1-t) log(1-T)] with T = sigmoid(s), written via log-sigmoid
    log_t = -np.logaddexp(0.0, -s)
    log_1mt = -np.logaddexp(0.0, s)
    value = -np.sum(target * log_t + (1.0 - target) * log_1mt) / n
    ds = (expit(s) - target) / n
    grad = _scatter_distance_grad(f, -ds, ds, mining)
    return float(value), grad


def total_loss(b: Batch, cfg: LossConfig = LossConfig(), return_terms: bool = False):
    """Weighted sum of the four terms.

    Returns ``(value, Gradients)``, plus a dict of the unweighted term values
    when ``return_terms`` is set.
    """
    mining = mine_hardest(b.features_net, b.labels)
    l_id, g_id = hard_id_loss(b)
    l_sid, g_sid = soft_id_loss(b)
    l_tri, g_tri = hard_triplet_loss(b, cfg.margin, mining)
    l_stri, g_stri = soft_triplet_loss(b, mining)
    a, t = cfg.lambda_id, cfg.lambda_tri
    value = (1 - a) * l_id + a * l_sid + (1 - t) * l_tri + t * l_stri
    grads = Gradients(
        features=(1 - t) * g_tri + t * g_stri,
        logits=(1 - a) * g_id + a * g_sid,
    )
    if not return_terms:
        return value, grads
    terms = {"id": l_id, "soft_id": l_sid, "triplet": l_tri, "soft_triplet": l_stri}
    return value, grads, terms
