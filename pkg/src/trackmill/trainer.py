"""Self-training loop: per-epoch pseudo labels, net/mean-net updates, EMA.

The feature model is a linear projection of raw frame features followed by
row normalisation; a tracklet window is average-pooled and renormalised.
A linear classifier sits on top. Any backbone that can produce per-frame
features can replace the projection by supplying its own extractor to
:func:`trackmill.association.associate`.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .association import DEFAULT_WINDOW, associate, sample_consecutive, tracklet_feature
from .clustering import NOISE, ClusterConfig
from .core import Dataset
from .evaluation import UndefinedPurityError, cluster_quality
from .exceptions import ConfigError, IntegrityError, TrainingError
from .losses import Batch, LossConfig, total_loss
from .noise import majority_labels
from .validation import check_dataset

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"TRKMODEL"
MODEL_VERSION = 1
_PARAMS = ("projection", "classifier", "bias")


@dataclass
class ModelState:
    projection: np.ndarray
    classifier: np.ndarray
    bias: np.ndarray
    step: int = 0

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(
            self.projection.copy(), self.classifier.copy(), self.bias.copy(), self.step
        )

    def params(self) -> dict:
        return {name: getattr(self, name) for name in _PARAMS}

    def equals(self, other: "ModelState") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _PARAMS)


@dataclass
class EmaState:
    """Temporal average of a :class:`ModelState` with momentum ``alpha``."""

    model: ModelState
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"EMA momentum must lie in [0, 1), got {self.alpha}")

    @classmethod
    def from_model(cls, net: ModelState, alpha: float) -> "EmaState":
        return cls(net.copy(), alpha)


def ema_update(ema: EmaState, net: ModelState, reset_classifier: bool = False) -> EmaState:
    """``E <- alpha * E + (1 - alpha) * theta`` for every parameter.

    With ``reset_classifier`` the classifier and bias are copied from ``net``
    instead of averaged (used when the number of pseudo classes changed).
    """
    a = ema.alpha
    e = ema.model
    if e.projection.shape != net.projection.shape:
        raise IntegrityError(
            f"projection shapes differ: ema {e.projection.shape} vs net {net.projection.shape}"
        )
    if not reset_classifier and e.classifier.shape != net.classifier.shape:
        raise IntegrityError(
            f"classifier shapes differ: ema {e.classifier.shape} vs net {net.classifier.shape}"
        )

    def blend(old, new):
        # incremental form keeps E bit-identical when theta == E
        return new.copy() if a == 0.0 else old + (1.0 - a) * (new - old)

    projection = blend(e.projection, net.projection)
    if reset_classifier:
        classifier, bias = net.classifier.copy(), net.bias.copy()
    else:
        classifier = blend(e.classifier, net.classifier)
        bias = blend(e.bias, net.bias)
    return EmaState(ModelState(projection, classifier, bias, e.step + 1), a)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 0.00035
    weight_decay: float = 0.0005
    alpha: float = 0.999
    p_ids: int = 8
    s_samples: int = 4
    n_frames: int = DEFAULT_WINDOW
    embed_dim: Optional[int] = None
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    classifier_init_std: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.p_ids < 2 or self.s_samples < 2 or self.p_ids * self.s_samples < 4:
            raise ConfigError("batches need >= 2 identities x >= 2 samples")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def init_model(d_raw: int, d: int, n_classes: int, rng, classifier_std: float = 0.01) -> ModelState:
    """Random orthogonal projection (distance-preserving at start) + small classifier."""
    q, r = np.linalg.qr(rng.standard_normal((max(d_raw, d), max(d_raw, d))))
    q = q * np.sign(np.diag(r))
    return ModelState(
        projection=q[:d_raw, :d].copy(),
        classifier=new_classifier(d, n_classes, rng, classifier_std),
        bias=np.zeros(n_classes),
    )


def new_classifier(d: int, n_classes: int, rng, std: float) -> np.ndarray:
    return rng.standard_normal((d, n_classes)) * std


def frame_features(raw: np.ndarray, model: ModelState) -> np.ndarray:
    v = np.asarray(raw, dtype=np.float64) @ model.projection
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def forward(model: ModelState, windows: np.ndarray):
    """Pooled features and logits for a (B, n, d_raw) stack of frame windows."""
    v = windows @ model.projection
    v_norm = np.linalg.norm(v, axis=-1, keepdims=True)
    g = v / v_norm
    u = g.mean(axis=1)
    u_norm = np.linalg.norm(u, axis=-1, keepdims=True)
    f = u / u_norm
    z = f @ model.classifier + model.bias
    cache = {"x": windows, "v_norm": v_norm, "g": g, "u_norm": u_norm, "f": f}
    return f, z, cache


def backward(model: ModelState, cache, grad_f: np.ndarray, grad_z: np.ndarray) -> dict:
    f, g = cache["f"], cache["g"]
    grad_classifier = f.T @ grad_z
    grad_bias = grad_z.sum(axis=0)
    grad_f = grad_f + grad_z @ model.classifier.T
    grad_u = (grad_f - f * np.sum(f * grad_f, axis=1, keepdims=True)) / cache["u_norm"]
    n = g.shape[1]
    grad_g = np.broadcast_to(grad_u[:, None, :] / n, g.shape)
    grad_v = (grad_g - g * np.sum(g * grad_g, axis=-1, keepdims=True)) / cache["v_norm"]
    x = cache["x"]
    grad_projection = x.reshape(-1, x.shape[-1]).T @ grad_v.reshape(-1, grad_v.shape[-1])
    return {"projection": grad_projection, "classifier": grad_classifier, "bias": grad_bias}


class AdamW:
    """Adam moment estimates with decoupled weight decay (bias excluded from decay)."""

    def __init__(self, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def reset(self, name):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)

    def step(self, model: ModelState, grads: dict):
        for name, grad in grads.items():
            p = getattr(model, name)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * grad
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * grad * grad
            m_hat = self.m[name] / (1 - self.b1**t)
            v_hat = self.v[name] / (1 - self.b2**t)
            decay = self.weight_decay * p if name != "bias" else 0.0
            setattr(model, name, p - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + decay))
        model.step += 1


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def identity_batches(labels: np.ndarray, p_ids: int, s_samples: int, rng):
    """Yield index arrays of ``p_ids`` distinct classes x ``s_samples`` members.

    Every class is visited once per epoch. Classes with fewer than
    ``s_samples`` members are sampled with repetition.
    """
    classes = np.unique(labels[labels != NOISE])
    members = {c: np.flatnonzero(labels == c) for c in classes}
    order = rng.permutation(classes)
    p = min(p_ids, len(classes))
    for start in range(0, len(order), p):
        group = list(order[start : start + p])
        if len(group) < p:
            rest = np.setdiff1d(classes, group)
            group += list(rng.choice(rest, size=p - len(group), replace=False))
        idx = []
        for c in group:
            pool = members[c]
            idx.append(rng.choice(pool, size=s_samples, replace=len(pool) < s_samples))
        yield np.concatenate(idx)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def pseudo_label_quality(pseudo, ds: Dataset) -> dict:
    """Frame-level and tracklet-level purity of a labelling (None when unlabelled)."""
    out = {"purity": None, "tracklet_purity": None, "noise_fraction": None}
    if not ds.is_labeled:
        return out
    try:
        frames = cluster_quality(pseudo, {t.id: t.pids for t in ds.tracklets})
        tracklets = cluster_quality(pseudo, majority_labels(ds))
    except UndefinedPurityError as exc:
        out["noise_fraction"] = exc.noise_fraction
        return out
    out.update(
        purity=frames.purity,
        tracklet_purity=tracklets.purity,
        noise_fraction=frames.noise_fraction,
    )
    return out


def train(
    ds: Dataset,
    raw_features: Optional[np.ndarray] = None,
    cfg: TrainConfig = TrainConfig(),
    cluster_cfg: Optional[ClusterConfig] = None,
):
    """Run the epoch loop.

    Args:
        ds: tracklets (already isolated if isolation is wanted).
        raw_features: (n_frames, d_raw) matrix in dataset frame order;
            defaults to the frames' embeddings.
        cfg: optimisation settings.
        cluster_cfg: inter-tracklet clustering settings (default: percentile eps).

    Returns:
        ``(net, ema, report)`` where ``report`` is a JSON-serialisable dict.
    """
    check_dataset(ds)
    cluster_cfg = cluster_cfg or ClusterConfig(eps_policy="percentile")
    raw = ds.embedding_matrix() if raw_features is None else np.asarray(raw_features)
    if raw.shape[0] != ds.n_frames:
        raise IntegrityError(f"{ds.n_frames} frames but {raw.shape[0]} raw feature rows")
    raw = raw.astype(np.float64)
    d_raw = raw.shape[1]
    d = cfg.embed_dim or d_raw
    lengths = np.array([len(t) for t in ds.tracklets])
    offsets = ds.offsets

    rng = np.random.default_rng([cfg.seed, 0])
    net = init_model(d_raw, d, 1, rng, cfg.classifier_init_std)
    ema = EmaState.from_model(net, cfg.alpha)
    opt = AdamW(cfg.lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)

    epochs = []
    for epoch in range(cfg.epochs):
        pseudo = associate(
            ds,
            extractor=lambda x: frame_features(x, net),
            cfg=cluster_cfg,
            n=cfg.n_frames,
            seed=cfg.seed,
            epoch=epoch,
            raw=raw,
        )
        labels = pseudo.labels
        k = pseudo.n_classes
        if k < 2:
            raise TrainingError(
                f"epoch {epoch}: association produced {k} cluster(s) and "
                f"{pseudo.n_noise}/{len(labels)} noise tracklets (eps={pseudo.eps}); "
                "cannot form triplets"
            )
        reset = k != net.n_classes or epoch == 0
        if reset:
            net.classifier = new_classifier(d, k, rng, cfg.classifier_init_std)
            net.bias = np.zeros(k)
            opt.reset("classifier")
            opt.reset("bias")
            ema = EmaState(
                replace(ema.model, classifier=net.classifier.copy(), bias=net.bias.copy()), ema.alpha
            )
        quality = pseudo_label_quality(pseudo, ds)

        brng = np.random.default_rng([cfg.seed, 1, epoch])
        losses = []
        term_sums = {}
        for batch_idx in identity_batches(labels, cfg.p_ids, cfg.s_samples, brng):
            windows = np.stack(
                [
                    raw[offsets[i] + sample_consecutive(int(lengths[i]), cfg.n_frames, brng)]
                    for i in batch_idx
                ]
            )
            f, z, cache = forward(net, windows)
            fm, zm, _ = forward(ema.model, windows)
            batch = Batch(f, z, fm, zm, labels[batch_idx])
            value, grads, terms = total_loss(batch, cfg.loss, return_terms=True)
            opt.step(net, backward(net, cache, grads.features, grads.logits))
            ema = ema_update(ema, net)
            losses.append(float(value))
            for name, v in terms.items():
                term_sums[name] = term_sums.get(name, 0.0) + v
        record = {
            "epoch": epoch,
            "n_classes": k,
            "n_noise": pseudo.n_noise,
            "eps": pseudo.eps,
            **quality,
            "iterations": len(losses),
            "mean_loss": float(np.mean(losses)),
            "terms": {n: s / len(losses) for n, s in term_sums.items()},
            "losses": losses,
        }
        logger.info(
            "epoch %d: K=%d noise=%d eps=%.4f loss=%.4f purity=%s",
            epoch, k, pseudo.n_noise, pseudo.eps or 0.0, record["mean_loss"], quality["purity"],
        )
        epochs.append(record)

    report = {
        "config": cfg.to_dict(),
        "cluster": {"policy": cluster_cfg.describe(), "min_pts": cluster_cfg.min_pts},
        "epochs": epochs,
        "loss_curve": [e["mean_loss"] for e in epochs],
        "n_classes": [e["n_classes"] for e in epochs],
        "purity": [e["purity"] for e in epochs],
        "final_labels": pseudo.to_dict(),
    }
    return net, ema, report


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_model(path, net: ModelState, ema: Optional[EmaState] = None, meta: Optional[dict] = None):
    """Binary model file: 8-byte magic, u32 header length, JSON header, float32 LE arrays."""
    arrays = [("net." + n, a) for n, a in net.params().items()]
    if ema is not None:
        arrays += [("ema." + n, a) for n, a in ema.model.params().items()]
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": MODEL_VERSION,
        "dtype": "float32-le",
        "step": net.step,
        "alpha": None if ema is None else ema.alpha,
        "arrays": entries,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_model(path):
    """Return ``(net, ema_or_None, header)`` from a file written by :func:`save_model`."""
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise IntegrityError(f"{path}: not a trackmill model file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("version") != MODEL_VERSION:
        raise IntegrityError(f"{path}: unsupported model version {header.get('version')}")
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float64)

    def build(prefix):
        return ModelState(*(arrays[f"{prefix}.{n}"] for n in _PARAMS), step=header["step"])

    net = build("net")
    ema = EmaState(build("ema"), header["alpha"]) if "ema.projection" in arrays else None
    return net, ema, header


class TMCTrainer(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`train`.

    ``fit(ds)`` trains on a (possibly isolated) dataset whose frames carry raw
    embeddings; ``transform(ds)`` returns one pooled, unit-norm feature per
    tracklet computed with the mean net (or the net when ``use_mean_net`` is
    False).
    """

    def __init__(
        self,
        epochs=40,
        lr=0.00035,
        weight_decay=0.0005,
        alpha=0.999,
        p_ids=8,
        s_samples=4,
        n_frames=DEFAULT_WINDOW,
        eps_policy="p0.1",
        min_pts=4,
        lambda_id=0.5,
        lambda_tri=0.8,
        margin=0.5,
        seed=0,
        use_mean_net=True,
    ):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.p_ids = p_ids
        self.s_samples = s_samples
        self.n_frames = n_frames
        self.eps_policy = eps_policy
        self.min_pts = min_pts
        self.lambda_id = lambda_id
        self.lambda_tri = lambda_tri
        self.margin = margin
        self.seed = seed
        self.use_mean_net = use_mean_net

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            alpha=self.alpha,
            p_ids=self.p_ids,
            s_samples=self.s_samples,
            n_frames=self.n_frames,
            loss=LossConfig(self.margin, self.lambda_id, self.lambda_tri),
            seed=self.seed,
        )

    def fit(self, ds: Dataset, y=None, raw_features=None):
        cluster_cfg = ClusterConfig.parse_policy(self.eps_policy, self.min_pts)
        self.net_, self.ema_, self.report_ = train(ds, raw_features, self.train_config(), cluster_cfg)
        return self

    @property
    def model_(self) -> ModelState:
        check_is_fitted(self, "net_")
        return self.ema_.model if self.use_mean_net else self.net_

    def transform(self, ds: Dataset) -> np.ndarray:
        return tracklet_features(ds, self.model_)


def tracklet_features(ds: Dataset, model: Optional[ModelState] = None) -> np.ndarray:
    """One pooled unit-norm feature per tracklet over all of its frames."""
    out = []
    for t in ds.tracklets:
        x = t.embeddings()
        out.append(tracklet_feature(x if model is None else frame_features(x, model)))
    return np.stack(out) if out else np.zeros((0, 0))
