"""Generate noisy tracklets from clean ones at a target (r_fm, r_sw).

Every clean tracklet is one ground-truth *unit* (a person seen by one
camera). For a target ``(r_fm, r_sw)`` over ``m`` units the output must hold

* ``P = round(m * r_fm)`` (unit, tracklet) incidence pairs, and
* ``n = round(m * r_fm / r_sw)`` tracklets.

Units are cut into ``P`` consecutive segments in total. ``P - n`` extra
incidences are spread over noisy tracklets (each mixing ``k >= 2`` units
of the same camera, ``k`` drawn from ``ids_per_noisy_dist``); remaining
segments become pure tracklets. Because no tracklet holds two segments of
the same unit, the measured rates equal ``P/m`` and ``P/n`` exactly.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import Dataset, NoiseRates, Tracklet, make_tracklet
from .exceptions import ConfigError, FeasibilityError, IntegrityError
from .noise import measure_rates

DEFAULT_IDS_PER_NOISY = {2: 0.80, 3: 0.15, 4: 0.05}
MIN_SEGMENT = 2


@dataclass(frozen=True)
class SimulationPlan:
    target: NoiseRates
    m_units: int
    n_total: int
    n_noisy: int
    incidence: int
    noisy_sizes: tuple
    ids_per_noisy_dist: tuple
    seed: int

    @property
    def n_pure(self) -> int:
        return self.n_total - self.n_noisy


def parse_distribution(spec) -> Dict[int, float]:
    """Accept ``{k: p}`` or the CLI form ``"2:0.8,3:0.15,4:0.05"``."""
    if spec is None:
        return dict(DEFAULT_IDS_PER_NOISY)
    if isinstance(spec, str):
        out = {}
        for part in spec.split(","):
            try:
                k, p = part.split(":")
                out[int(k)] = float(p)
            except ValueError as exc:
                raise ConfigError(f"bad distribution entry {part!r}; expected k:p") from exc
        spec = out
    dist = {int(k): float(p) for k, p in dict(spec).items()}
    if not dist or any(k < 2 for k in dist) or any(p < 0 for p in dist.values()):
        raise ConfigError(f"ids-per-noisy distribution needs keys >= 2 and p >= 0, got {dist}")
    total = sum(dist.values())
    if total <= 0:
        raise ConfigError("ids-per-noisy distribution has zero mass")
    return {k: p / total for k, p in sorted(dist.items())}


def _unit_capacity(length: int) -> int:
    return max(1, length // MIN_SEGMENT)


def _check_clean(ds: Dataset):
    if not ds.is_labeled:
        raise IntegrityError("simulation needs a labelled dataset")
    seen = set()
    for t in ds.tracklets:
        if len(t.id_set) != 1:
            raise IntegrityError(f"tracklet {t.id!r} is not clean (ids {sorted(t.id_set)})")
        unit = (next(iter(t.id_set)), t.camera_id)
        if unit in seen:
            raise IntegrityError(f"person {unit[0]} appears in two clean tracklets of camera {unit[1]}")
        seen.add(unit)


def plan_from_counts(
    m_units: int,
    target: NoiseRates,
    dist=None,
    seed: int = 0,
    capacity: Optional[int] = None,
    max_units_per_camera: Optional[int] = None,
) -> SimulationPlan:
    """Plan a simulation from unit counts alone.

    ``capacity`` (max number of segments the units can be cut into) and
    ``max_units_per_camera`` enable the feasibility checks that need the
    dataset; :func:`plan_simulation` fills them in.
    """
    dist = parse_distribution(dist)
    if m_units < 1:
        raise FeasibilityError("need at least one ground-truth unit")
    incidence = int(round(m_units * target.r_fm))
    n_total = int(round(m_units * target.r_fm / target.r_sw))
    n_total = max(1, n_total)
    if incidence < n_total:
        raise FeasibilityError(f"incidence budget {incidence} below tracklet count {n_total}")
    if capacity is not None and incidence > capacity:
        raise FeasibilityError(
            f"r_fm={target.r_fm} needs {incidence} segments but units of >= {MIN_SEGMENT} "
            f"frames allow only {capacity}"
        )
    ks = np.array(list(dist.keys()))
    ps = np.array(list(dist.values()))
    if max_units_per_camera is not None:
        if max_units_per_camera < 2 and incidence > n_total:
            raise FeasibilityError("ID switches need two units sharing a camera; none do")
        keep = ks <= max_units_per_camera
        if not keep.all():
            ks, ps = ks[keep], ps[keep]
            if ps.sum() == 0:
                raise FeasibilityError(
                    f"r_sw={target.r_sw}: no ID count in the distribution fits the "
                    f"{max_units_per_camera} units available per camera"
                )
            ps = ps / ps.sum()

    rng = np.random.default_rng(seed)
    excess = incidence - n_total
    sizes = []
    while excess > 0:
        k = int(rng.choice(ks, p=ps))
        k = min(k, excess + 1)
        sizes.append(k)
        excess -= k - 1
    if len(sizes) > n_total:
        raise FeasibilityError(
            f"r_sw={target.r_sw} needs {len(sizes)} noisy tracklets out of {n_total}; "
            "the ids-per-noisy distribution is too narrow"
        )
    return SimulationPlan(
        target=NoiseRates(target.r_fm, target.r_sw),
        m_units=m_units,
        n_total=n_total,
        n_noisy=len(sizes),
        incidence=incidence,
        noisy_sizes=tuple(sizes),
        ids_per_noisy_dist=tuple(dist.items()),
        seed=int(seed),
    )


def plan_simulation(ds: Dataset, target: NoiseRates, dist=None, seed: int = 0) -> SimulationPlan:
    """Plan a simulation on a clean, labelled dataset."""
    _check_clean(ds)
    per_cam = defaultdict(int)
    for t in ds.tracklets:
        per_cam[t.camera_id] += 1
    capacity = sum(_unit_capacity(len(t)) for t in ds.tracklets)
    return plan_from_counts(
        ds.n_tracklets,
        target,
        dist,
        seed,
        capacity=capacity,
        max_units_per_camera=max(per_cam.values()) if per_cam else 0,
    )


def _allocate_segments(lengths: np.ndarray, total: int, rng) -> np.ndarray:
    caps = np.maximum(1, lengths // MIN_SEGMENT)
    counts = np.ones(len(lengths), dtype=np.int64)
    remaining = total - len(lengths)
    while remaining > 0:
        open_ = np.flatnonzero(counts < caps)
        if open_.size == 0:
            raise FeasibilityError("not enough frames to cut the requested number of segments")
        draws = rng.multinomial(remaining, np.full(open_.size, 1.0 / open_.size))
        counts[open_] += draws
        over = np.maximum(counts - caps, 0)
        counts -= over
        remaining = int(over.sum())
    return counts


def _cut(length: int, n_segments: int, rng) -> list:
    """Uniformly random composition of ``length`` into parts of >= MIN_SEGMENT."""
    if n_segments == 1:
        return [length]
    slack = length - MIN_SEGMENT * n_segments
    bars = np.sort(rng.choice(slack + n_segments - 1, size=n_segments - 1, replace=False))
    parts = np.diff(np.concatenate([[-1], bars, [slack + n_segments - 1]])) - 1
    return [int(p) + MIN_SEGMENT for p in parts]


def generate_noisy_dataset(ds: Dataset, plan: SimulationPlan) -> Dataset:
    """Realise ``plan`` on ``ds``; deterministic in ``plan.seed``."""
    _check_clean(ds)
    if ds.n_tracklets != plan.m_units:
        raise IntegrityError(
            f"plan was made for {plan.m_units} units, dataset has {ds.n_tracklets}"
        )
    rng = np.random.default_rng([plan.seed, 1])
    units = list(ds.tracklets)
    lengths = np.array([len(t) for t in units])
    counts = _allocate_segments(lengths, plan.incidence, rng)

    segments = []
    for t, c in zip(units, counts):
        bounds = np.cumsum([0] + _cut(len(t), int(c), rng))
        segs = [t.frames[bounds[i] : bounds[i + 1]] for i in range(int(c))]
        segments.append([segs[i] for i in rng.permutation(len(segs))])

    by_cam = defaultdict(list)
    for idx, t in enumerate(units):
        by_cam[t.camera_id].append(idx)
    cams = sorted(by_cam)
    avail = [len(s) for s in segments]
    live = {c: list(by_cam[c]) for c in cams}
    cam_avail = {c: sum(avail[u] for u in by_cam[c]) for c in cams}

    noisy = []
    for k in sorted(plan.noisy_sizes, reverse=True):
        eligible = [c for c in cams if len(live[c]) >= k]
        if not eligible:
            raise FeasibilityError(
                f"no camera has {k} units with unassigned segments left; "
                "lower r_sw or add units per camera"
            )
        weight = np.array([cam_avail[c] for c in eligible], dtype=float)
        cam = eligible[int(rng.choice(len(eligible), p=weight / weight.sum()))]
        picks = rng.choice(len(live[cam]), size=k, replace=False)
        chosen = [live[cam][i] for i in picks]
        parts = []
        for u in chosen:
            avail[u] -= 1
            parts.append(segments[u][avail[u]])
            if avail[u] == 0:
                live[cam].remove(u)
        cam_avail[cam] -= k
        noisy.append((cam, [parts[i] for i in rng.permutation(k)]))

    pure = []
    for u, t in enumerate(units):
        for seg in segments[u][: avail[u]]:
            pure.append((t.camera_id, [seg]))

    assembled = noisy + pure
    if len(assembled) != plan.n_total:
        raise IntegrityError(f"assembled {len(assembled)} tracklets, plan expects {plan.n_total}")
    order = rng.permutation(len(assembled))
    width = max(6, len(str(len(assembled))))
    out = []
    for new_idx, src in enumerate(order):
        cam, parts = assembled[src]
        frames = [fr for part in parts for fr in part]
        out.append(Tracklet.from_frames(f"sim{new_idx:0{width}d}", cam, frames))
    return Dataset(tuple(out))


def make_clean_dataset(
    n_ids: int,
    n_cameras: int = 4,
    length_range=(20, 60),
    cameras_per_id=(2, None),
    seed: int = 0,
    pid_offset: int = 0,
) -> Dataset:
    """Synthetic clean dataset: one tracklet per (person, camera) unit.

    Frames carry an ``image_ref`` of the form ``p{pid}/c{cam}/{i}`` so that
    frame identity survives simulation. ``cameras_per_id`` is an inclusive
    range; ``None`` as upper bound means all cameras. Person ids run from
    ``pid_offset`` to ``pid_offset + n_ids - 1``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = cameras_per_id
    hi = n_cameras if hi is None else hi
    lo = min(lo, n_cameras)
    tracklets = []
    for pid in range(pid_offset, pid_offset + n_ids):
        k = int(rng.integers(lo, hi + 1))
        for cam in sorted(rng.choice(n_cameras, size=k, replace=False)):
            length = int(rng.integers(length_range[0], length_range[1] + 1))
            tid = f"p{pid:05d}c{cam}"
            refs = [f"p{pid}/c{cam}/{i}" for i in range(length)]
            tracklets.append(make_tracklet(tid, int(cam), [pid] * length, image_refs=refs))
    return Dataset(tuple(tracklets))


class NoiseSimulator(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` plans on a clean dataset, ``transform`` realises it.

    Parameters
    ----------
    r_fm, r_sw : float
        Target fragmentation and switch rates.
    ids_per_noisy : dict or str, optional
        Distribution of distinct IDs per noisy tracklet.
    seed : int
    """

    def __init__(self, r_fm=1.0, r_sw=1.0, ids_per_noisy=None, seed=0):
        self.r_fm = r_fm
        self.r_sw = r_sw
        self.ids_per_noisy = ids_per_noisy
        self.seed = seed

    def fit(self, ds: Dataset, y=None):
        self.plan_ = plan_simulation(
            ds, NoiseRates(self.r_fm, self.r_sw), self.ids_per_noisy, self.seed
        )
        return self

    def transform(self, ds: Dataset) -> Dataset:
        check_is_fitted(self, "plan_")
        out = generate_noisy_dataset(ds, self.plan_)
        self.measured_ = measure_rates(out)
        return out
