"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .data import SkeletonSequence
from .errors import DataError


def as_sequences(X) -> list[SkeletonSequence]:
    """Coerce estimator input into a list of sequences.

    Accepts a list of :class:`SkeletonSequence`, an ndarray of shape
    ``[n, T, N, D]`` (single person) or ``[n, P, T, N, D]``, or a list of
    such per-sample arrays.
    """
    if isinstance(X, SkeletonSequence):
        return [X]
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            return [SkeletonSequence([x], sample_id=str(i)) for i, x in enumerate(X)]
        if X.ndim == 5:
            return [
                SkeletonSequence(list(x), sample_id=str(i)) for i, x in enumerate(X)
            ]
        raise DataError(
            f"array input must be [n, T, N, D] or [n, persons, T, N, D], got shape {X.shape}"
        )
    if isinstance(X, (list, tuple)):
        out = []
        for i, item in enumerate(X):
            if isinstance(item, SkeletonSequence):
                out.append(item)
                continue
            arr = np.asarray(item, dtype=np.float64)
            if arr.ndim == 3:
                out.append(SkeletonSequence([arr], sample_id=str(i)))
            elif arr.ndim == 4:
                out.append(SkeletonSequence(list(arr), sample_id=str(i)))
            else:
                raise DataError(
                    f"sample {i}: expected [T, N, D] or [persons, T, N, D], got shape {arr.shape}"
                )
        if not out:
            raise DataError("empty input")
        return out
    raise DataError(f"cannot interpret {type(X).__name__} as skeleton sequences")


def check_consistent_geometry(sequences: list[SkeletonSequence]) -> tuple[int, int]:
    """All sequences must agree on joint count and coordinate dimension."""
    joints = sequences[0].joint_count
    coords = sequences[0].coord_dim
    for i, seq in enumerate(sequences):
        if seq.joint_count != joints or seq.coord_dim != coords:
            raise DataError(
                f"sample {i} has geometry ({seq.joint_count}, {seq.coord_dim}), "
                f"expected ({joints}, {coords})"
            )
    return joints, coords


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise DataError(f"y must have shape ({n_samples},), got {y.shape}")
    if y.dtype.kind not in "iu" and not np.all(y == y.astype(np.int64)):
        raise DataError("labels must be integers")
    return y.astype(np.int64)
