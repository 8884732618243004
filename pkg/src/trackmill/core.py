"""Domain types (frames, tracklets, datasets, noise rates) and manifest I/O.

A manifest is a JSON-lines file. The first line is an optional header
object carrying ``"format": "trackmill-manifest"``; every other line is one
frame::

    {"t": "trk000001", "s": 0, "pid": 7, "cam": 2, "emb": [0.1, ...], "img": null}

Large embedding matrices can be moved into a binary sidecar (see
:func:`write_sidecar`), in which case every frame line carries ``"emb": null``
and the header names the sidecar file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, IntegrityError, ManifestParseError

MANIFEST_FORMAT = "trackmill-manifest"
MANIFEST_VERSION = 1
SIDECAR_MAGIC = b"TRKEMB01"
_SIDECAR_HEADER = struct.Struct("<8sII")


def _as_embedding(vec) -> Optional[np.ndarray]:
    if vec is None:
        return None
    arr = np.array(vec, dtype=np.float32).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One detected image of a (nominal) person inside a tracklet."""

    tracklet_id: str
    seq: int
    camera_id: int
    gt_pid: Optional[int] = None
    embedding: Optional[np.ndarray] = None
    image_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "embedding", _as_embedding(self.embedding))
        if self.seq < 0:
            raise IntegrityError(f"negative seq {self.seq} in tracklet {self.tracklet_id!r}")
        if self.embedding is None and self.image_ref is None:
            raise IntegrityError(
                f"frame ({self.tracklet_id!r}, {self.seq}) has neither embedding nor image_ref"
            )

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        if (self.tracklet_id, self.seq, self.camera_id, self.gt_pid, self.image_ref) != (
            other.tracklet_id,
            other.seq,
            other.camera_id,
            other.gt_pid,
            other.image_ref,
        ):
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    __hash__ = None

    def moved(self, tracklet_id: str, seq: int) -> "FrameRecord":
        """Same frame content placed at a new (tracklet, seq) position."""
        out = object.__new__(FrameRecord)
        out.__dict__.update(self.__dict__, tracklet_id=tracklet_id, seq=seq)
        return out

    def content_key(self) -> tuple:
        """Identity of the frame content, independent of which tracklet holds it."""
        emb = None if self.embedding is None else self.embedding.tobytes()
        return (self.gt_pid, self.camera_id, self.image_ref, emb)


@dataclass(frozen=True, eq=False)
class Tracklet:
    """An ordered run of frames from a single camera."""

    id: str
    camera_id: int
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise IntegrityError(f"tracklet {self.id!r} has no frames")
        for expected, fr in enumerate(frames):
            if fr.seq != expected:
                raise IntegrityError(
                    f"tracklet {self.id!r}: seq values must be dense from 0, "
                    f"found {fr.seq} at position {expected}"
                )
            if fr.camera_id != self.camera_id:
                raise IntegrityError(
                    f"tracklet {self.id!r}: frame {fr.seq} has camera {fr.camera_id}, "
                    f"tracklet camera is {self.camera_id}"
                )
            if fr.tracklet_id != self.id:
                raise IntegrityError(
                    f"frame {fr.seq} claims tracklet {fr.tracklet_id!r}, held by {self.id!r}"
                )

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Tracklet):
            return NotImplemented
        return (
            self.id == other.id
            and self.camera_id == other.camera_id
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    __hash__ = None

    @classmethod
    def from_frames(cls, tracklet_id: str, camera_id: int, frames: Iterable[FrameRecord]):
        """Build a tracklet from frames taken from anywhere, renumbering seq from 0."""
        renamed = [fr.moved(tracklet_id, i) for i, fr in enumerate(frames)]
        return cls(tracklet_id, camera_id, tuple(renamed))

    @property
    def pids(self) -> list:
        return [fr.gt_pid for fr in self.frames]

    @property
    def id_set(self) -> frozenset:
        """Distinct ground-truth IDs in the tracklet (missing labels ignored)."""
        return frozenset(p for p in self.pids if p is not None)

    @property
    def is_labeled(self) -> bool:
        return all(fr.gt_pid is not None for fr in self.frames)

    def embeddings(self) -> np.ndarray:
        if any(fr.embedding is None for fr in self.frames):
            raise IntegrityError(f"tracklet {self.id!r} has frames without embeddings")
        return np.stack([fr.embedding for fr in self.frames])


@dataclass(frozen=True, eq=False)
class Dataset:
    """A collection of tracklets; the unit every pipeline stage consumes."""

    tracklets: tuple = field(default_factory=tuple)

    def __post_init__(self):
        tracklets = tuple(self.tracklets)
        object.__setattr__(self, "tracklets", tracklets)
        seen = set()
        dim = None
        for t in tracklets:
            if t.id in seen:
                raise IntegrityError(f"duplicate tracklet id {t.id!r}")
            seen.add(t.id)
            for fr in t.frames:
                if fr.embedding is not None:
                    if dim is None:
                        dim = fr.embedding.shape[0]
                    elif fr.embedding.shape[0] != dim:
                        raise IntegrityError(
                            f"embedding dimension mismatch: {fr.embedding.shape[0]} vs {dim} "
                            f"at ({t.id!r}, {fr.seq})"
                        )
        object.__setattr__(self, "_dim", dim)

    def __len__(self):
        return len(self.tracklets)

    def __iter__(self) -> Iterator[Tracklet]:
        return iter(self.tracklets)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))

    __hash__ = None

    @property
    def n_tracklets(self) -> int:
        return len(self.tracklets)

    @cached_property
    def ids(self) -> frozenset:
        return frozenset(fr.gt_pid for fr in self.frames() if fr.gt_pid is not None)

    @property
    def embedding_dim(self) -> Optional[int]:
        return self._dim

    @property
    def n_frames(self) -> int:
        return sum(len(t) for t in self.tracklets)

    @property
    def is_labeled(self) -> bool:
        return all(t.is_labeled for t in self.tracklets)

    def frames(self) -> Iterator[FrameRecord]:
        for t in self.tracklets:
            yield from t.frames

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offset of each tracklet's first frame in :meth:`embedding_matrix`."""
        lengths = np.array([len(t) for t in self.tracklets], dtype=np.int64)
        return np.concatenate([[0], np.cumsum(lengths)])

    def embedding_matrix(self) -> np.ndarray:
        """Stack every frame embedding, tracklet by tracklet, into an (n_frames, d) array."""
        if self.n_frames == 0:
            return np.zeros((0, self._dim or 0), dtype=np.float32)
        rows = []
        for fr in self.frames():
            if fr.embedding is None:
                raise IntegrityError(f"frame ({fr.tracklet_id!r}, {fr.seq}) has no embedding")
            rows.append(fr.embedding)
        return np.stack(rows)

    def with_embeddings(self, matrix: np.ndarray) -> "Dataset":
        """Return a copy whose frame embeddings are the rows of ``matrix``."""
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != self.n_frames:
            raise IntegrityError(
                f"expected {self.n_frames} embedding rows, got array of shape {matrix.shape}"
            )
        out = []
        row = 0
        for t in self.tracklets:
            frames = []
            for fr in t.frames:
                frames.append(replace(fr, embedding=matrix[row]))
                row += 1
            out.append(Tracklet(t.id, t.camera_id, tuple(frames)))
        return Dataset(tuple(out))

    def get(self, tracklet_id: str) -> Tracklet:
        for t in self.tracklets:
            if t.id == tracklet_id:
                return t
        raise KeyError(tracklet_id)


@dataclass(frozen=True)
class NoiseRates:
    """Fragmentation rate ``r_fm`` and switch rate ``r_sw``.

    When produced by a measurement, the integer counts behind the two ratios
    are kept so the incidence identity can be checked without rounding.
    """

    r_fm: float
    r_sw: float
    n_tracklets: Optional[int] = None
    n_units: Optional[int] = None
    incidence: Optional[int] = None

    def __post_init__(self):
        for name in ("r_fm", "r_sw"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 1.0:
                raise ConfigError(f"{name} must be finite and >= 1, got {v}")


def make_tracklet(
    tracklet_id: str,
    camera_id: int,
    pids: Sequence[Optional[int]],
    embeddings: Optional[np.ndarray] = None,
    image_refs: Optional[Sequence[str]] = None,
) -> Tracklet:
    """Convenience constructor used by tests and synthetic generators."""
    n = len(pids)
    if image_refs is None and embeddings is None:
        image_refs = [f"{tracklet_id}/{i:05d}" for i in range(n)]
    frames = []
    for i, pid in enumerate(pids):
        frames.append(
            FrameRecord(
                tracklet_id=tracklet_id,
                seq=i,
                camera_id=camera_id,
                gt_pid=None if pid is None else int(pid),
                embedding=None if embeddings is None else embeddings[i],
                image_ref=None if image_refs is None else image_refs[i],
            )
        )
    return Tracklet(tracklet_id, camera_id, tuple(frames))


# --------------------------------------------------------------------------
# Manifest I/O
# --------------------------------------------------------------------------

def _frame_to_json(fr: FrameRecord, inline_embedding: bool) -> str:
    emb = None
    if inline_embedding and fr.embedding is not None:
        emb = [float(v) for v in fr.embedding]
    rec = {
        "t": fr.tracklet_id,
        "s": fr.seq,
        "pid": fr.gt_pid,
        "cam": fr.camera_id,
        "emb": emb,
        "img": fr.image_ref,
    }
    return json.dumps(rec, separators=(",", ":"))


def save_manifest(ds: Dataset, path, sidecar: bool = False) -> None:
    """Write ``ds`` as a JSON-lines manifest.

    Args:
        ds: dataset to write.
        path: destination file.
        sidecar: store embeddings in ``<path>.emb.bin`` instead of inline.
            Requires every frame to carry an embedding.
    """
    path = Path(path)
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "embedding_dim": ds.embedding_dim,
        "sidecar": None,
    }
    if sidecar:
        side_path = path.with_name(path.name + ".emb.bin")
        header["sidecar"] = side_path.name
    try:
        if sidecar:
            write_sidecar(ds.embedding_matrix(), side_path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for fr in ds.frames():
                fh.write(_frame_to_json(fr, inline_embedding=not sidecar) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write manifest {path}: {exc.strerror}") from exc


def _parse_frame(obj, lineno, path) -> FrameRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError("frame line must be a JSON object", lineno, path)
    missing = [k for k in ("t", "s", "cam") if k not in obj]
    if missing:
        raise ManifestParseError(f"missing field(s) {missing}", lineno, path)
    t, s, cam = obj["t"], obj["s"], obj["cam"]
    pid = obj.get("pid")
    if not isinstance(t, str):
        raise ManifestParseError(f"'t' must be a string, got {t!r}", lineno, path)
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ManifestParseError(f"'s' must be a non-negative integer, got {s!r}", lineno, path)
    if not isinstance(cam, int) or isinstance(cam, bool):
        raise ManifestParseError(f"'cam' must be an integer, got {cam!r}", lineno, path)
    if pid is not None and (not isinstance(pid, int) or isinstance(pid, bool)):
        raise ManifestParseError(f"'pid' must be an integer or null, got {pid!r}", lineno, path)
    emb = obj.get("emb")
    if emb is not None and not (
        isinstance(emb, list) and all(isinstance(v, (int, float)) for v in emb)
    ):
        raise ManifestParseError("'emb' must be a list of numbers or null", lineno, path)
    img = obj.get("img")
    if img is not None and not isinstance(img, str):
        raise ManifestParseError(f"'img' must be a string or null, got {img!r}", lineno, path)
    return obj


def load_manifest(path) -> Dataset:
    """Read a manifest written by :func:`save_manifest` (or by hand).

    Tracklets appear in order of first occurrence; frames inside a tracklet
    may be listed in any order and are sorted by ``s``.
    """
    path = Path(path)
    header = None
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", lineno, path) from exc
            if isinstance(obj, dict) and obj.get("format") == MANIFEST_FORMAT:
                if header is not None or records:
                    raise ManifestParseError("header must be the first line", lineno, path)
                header = obj
                continue
            records.append((lineno, _parse_frame(obj, lineno, path)))

    side = None
    if header is not None and header.get("sidecar"):
        side = read_sidecar(path.parent / header["sidecar"])
        if side.shape[0] != len(records):
            raise IntegrityError(
                f"sidecar has {side.shape[0]} rows but manifest {path} lists {len(records)} frames"
            )

    order = []
    grouped = {}
    for row, (lineno, obj) in enumerate(records):
        tid = obj["t"]
        if tid not in grouped:
            grouped[tid] = {}
            order.append(tid)
        if obj["s"] in grouped[tid]:
            raise IntegrityError(f"{path}:{lineno}: duplicate frame ({tid!r}, {obj['s']})")
        emb = side[row] if side is not None else obj.get("emb")
        try:
            frame = FrameRecord(
                tracklet_id=tid,
                seq=obj["s"],
                camera_id=obj["cam"],
                gt_pid=obj.get("pid"),
                embedding=emb,
                image_ref=obj.get("img"),
            )
        except IntegrityError as exc:
            raise IntegrityError(f"{path}:{lineno}: {exc}") from exc
        grouped[tid][obj["s"]] = frame

    tracklets = []
    for tid in order:
        by_seq = grouped[tid]
        frames = tuple(by_seq[s] for s in sorted(by_seq))
        try:
            tracklets.append(Tracklet(tid, frames[0].camera_id, frames))
        except IntegrityError as exc:
            raise IntegrityError(f"{path}: {exc}") from exc
    return Dataset(tuple(tracklets))


def write_sidecar(matrix: np.ndarray, path) -> None:
    """Write a row-major little-endian float32 matrix with an 16-byte header."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise IntegrityError(f"sidecar matrix must be 2-D, got shape {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(_SIDECAR_HEADER.pack(SIDECAR_MAGIC, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes(order="C"))


def read_sidecar(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_SIDECAR_HEADER.size)
        if len(head) != _SIDECAR_HEADER.size:
            raise ManifestParseError("truncated sidecar header", path=path)
        magic, rows, dim = _SIDECAR_HEADER.unpack(head)
        if magic != SIDECAR_MAGIC:
            raise ManifestParseError(f"bad sidecar magic {magic!r}", path=path)
        data = fh.read()
    expected = rows * dim * 4
    if len(data) != expected:
        raise ManifestParseError(
            f"sidecar payload is {len(data)} bytes, header implies {expected}", path=path
        )
    return np.frombuffer(data, dtype="<f4").reshape(rows, dim).astype(np.float32)


def atomic_target(path) -> Path:
    """Name of the in-progress file used while ``path`` is being produced."""
    path = Path(path)
    return path.with_name(path.name + ".partial")


def finalize(partial, path) -> None:
    os.replace(partial, path)
