"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .core import Dataset
from .exceptions import DegenerateInputError, IntegrityError, LabelsRequiredError

UNIT_NORM_ATOL = 1e-6


def l2_normalize(x, axis=-1) -> np.ndarray:
    """Scale rows to unit L2 norm; a zero row is an error, not a silent NaN."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(np.squeeze(norms, axis=axis) == 0)
        raise DegenerateInputError(f"cannot normalise zero-norm row(s) {bad[:5].tolist()}")
    return x / norms


def check_embeddings(x, unit_norm=False, allow_empty=False, atol=UNIT_NORM_ATOL) -> np.ndarray:
    """Validate an (n, d) embedding matrix and return it as a float array.

    Raises ``DegenerateInputError`` for zero-norm rows when ``unit_norm`` is
    requested, ``ValueError`` for non-finite values or rows off the sphere.
    """
    x = np.asarray(x)
    if x.ndim == 1 and x.size == 0:
        x = x.reshape(0, 0)
    if x.ndim != 2:
        raise IntegrityError(f"expected a 2-D embedding matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        if not allow_empty:
            raise IntegrityError("embedding matrix has no rows")
        return x.astype(np.float64)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise IntegrityError("embedding matrix contains non-finite values")
    if unit_norm:
        norms = np.linalg.norm(x.astype(np.float64), axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError(
                f"zero-norm embedding row(s) {np.flatnonzero(norms == 0)[:5].tolist()}"
            )
        off = np.abs(norms - 1.0)
        if np.any(off > atol):
            raise IntegrityError(
                f"rows must be unit-norm within {atol}; worst deviation {off.max():.3g}"
            )
    return x


def check_dataset(ds, require_labels=False, require_embeddings=False) -> Dataset:
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a trackmill Dataset, got {type(ds).__name__}")
    if require_labels and not ds.is_labeled:
        raise LabelsRequiredError("this operation needs gt_pid on every frame")
    if require_embeddings:
        for fr in ds.frames():
            if fr.embedding is None:
                raise IntegrityError(f"frame ({fr.tracklet_id!r}, {fr.seq}) has no embedding")
    return ds
