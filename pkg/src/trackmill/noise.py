"""Fragmentation / switch rates and per-tracklet noise profiles."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import List

from .core import Dataset, NoiseRates, Tracklet
from .exceptions import ConfigError, LabelsRequiredError

COUNTINGS = ("camera", "global")


@dataclass(frozen=True)
class TrackletNoiseProfile:
    tracklet_id: str
    distinct_ids: int
    majority_id: int
    majority_fraction: float
    switch_points: tuple


def _require_labels(ds: Dataset):
    for t in ds.tracklets:
        for fr in t.frames:
            if fr.gt_pid is None:
                raise LabelsRequiredError(
                    f"frame ({t.id!r}, {fr.seq}) has no gt_pid; noise metrics need labelled data"
                )


def _units(t: Tracklet, counting: str) -> set:
    if counting == "camera":
        return {(fr.gt_pid, t.camera_id) for fr in t.frames}
    return {fr.gt_pid for fr in t.frames}


def measure_rates(ds: Dataset, counting: str = "camera") -> NoiseRates:
    """Measure ``(r_fm, r_sw)`` of a labelled dataset.

    ``r_fm`` is the mean number of tracklets each ground-truth unit appears
    in and ``r_sw`` the mean number of distinct units per tracklet. Both
    count the same (unit, tracklet) incidence pairs, so
    ``n_tracklets * r_sw == n_units * r_fm``.

    Args:
        ds: labelled dataset with at least one tracklet.
        counting: ``"camera"`` treats each (person, camera) pair as a unit,
            so a clean multi-camera dataset measures (1, 1). ``"global"``
            counts persons regardless of camera.
    """
    if counting not in COUNTINGS:
        raise ConfigError(f"counting must be one of {COUNTINGS}, got {counting!r}")
    _require_labels(ds)
    if ds.n_tracklets == 0:
        raise LabelsRequiredError("cannot measure rates on an empty dataset")
    units = set()
    incidence = 0
    for t in ds.tracklets:
        q = _units(t, counting)
        units |= q
        incidence += len(q)
    n, m = ds.n_tracklets, len(units)
    return NoiseRates(
        r_fm=incidence / m, r_sw=incidence / n, n_tracklets=n, n_units=m, incidence=incidence
    )


def tracklet_profile(t: Tracklet) -> TrackletNoiseProfile:
    pids = t.pids
    if any(p is None for p in pids):
        raise LabelsRequiredError(f"tracklet {t.id!r} has unlabelled frames")
    counts = Counter(pids)
    top = max(counts.values())
    majority = min(p for p, c in counts.items() if c == top)
    switches = tuple(t.frames[i].seq for i in range(1, len(pids)) if pids[i] != pids[i - 1])
    return TrackletNoiseProfile(
        tracklet_id=t.id,
        distinct_ids=len(counts),
        majority_id=majority,
        majority_fraction=top / len(pids),
        switch_points=switches,
    )


def noise_profiles(ds: Dataset) -> List[TrackletNoiseProfile]:
    _require_labels(ds)
    return [tracklet_profile(t) for t in ds.tracklets]


def noise_ratio(profiles) -> float:
    """Percentage of frames that disagree with their tracklet's majority ID.

    Averaged per tracklet (each tracklet weighs the same), in percent.
    """
    profiles = list(profiles)
    if not profiles:
        return 0.0
    mean_major = sum(p.majority_fraction for p in profiles) / len(profiles)
    return 100.0 * (1.0 - mean_major)


def majority_labels(ds: Dataset) -> dict:
    """Map each tracklet id to its majority ground-truth ID."""
    return {p.tracklet_id: p.majority_id for p in noise_profiles(ds)}


def measurement_report(ds: Dataset, counting: str = "camera") -> dict:
    rates = measure_rates(ds, counting)
    return {
        "r_fm": rates.r_fm,
        "r_sw": rates.r_sw,
        "n_tracklets": rates.n_tracklets,
        "n_ids": len(ds.ids),
        "n_units": rates.n_units,
        "noise_pct": noise_ratio(noise_profiles(ds)),
        "counting": counting,
    }
