"""Input coercion shared by the estimator API and the command line."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .geometry import PointCloud

__all__ = ["check_cloud", "check_clouds", "check_labels", "check_positive_int", "check_fraction", "unique_labels"]


def check_cloud(value, label: Optional[int] = None) -> PointCloud:
    """A :class:`PointCloud` from a cloud or an ``N x 3`` array-like."""
    if isinstance(value, PointCloud):
        return value if label is None else PointCloud(value.points, label)
    return PointCloud(np.asarray(value), label)


def check_clouds(X, y=None) -> list[PointCloud]:
    """Coerce a batch of clouds.

    ``X`` may be a ``B x N x 3`` array or a sequence of clouds or ``N x 3``
    arrays (the clouds may differ in size). With ``y`` every cloud is
    relabelled from it.
    """
    if isinstance(X, PointCloud):
        raise ValidationError("expected a collection of clouds, got a single PointCloud")
    if isinstance(X, np.ndarray):
        if X.ndim != 3 or X.shape[-1] != 3:
            raise ValidationError(f"a batch array must have shape (B, N, 3), got {X.shape}")
        items = list(X)
    else:
        try:
            items = list(X)
        except TypeError:
            raise ValidationError(f"expected a collection of clouds, got {type(X).__name__}") from None
    if not items:
        raise ValidationError("no clouds given")
    labels = [None] * len(items) if y is None else check_labels(y, len(items)).tolist()
    out = []
    for i, (item, label) in enumerate(zip(items, labels)):
        try:
            out.append(check_cloud(item, label))
        except ValidationError as exc:
            raise ValidationError(f"cloud {i}: {exc}") from None
    return out


def check_labels(y, n: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"labels must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValidationError(f"{arr.shape[0]} labels for {n} clouds")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise ValidationError("numeric labels must be whole numbers")
        arr = arr.astype(np.int64)
    if arr.dtype.kind not in "iu":
        raise ValidationError(f"labels must be integer class indices, got dtype {arr.dtype}")
    return arr.astype(np.int64)


def check_positive_int(name: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(name: str, value, open_right: bool = True) -> float:
    value = float(value)
    ok = 0 <= value < 1 if open_right else 0 <= value <= 1
    if not ok:
        raise ValidationError(f"{name} must lie in [0, 1{')' if open_right else ']'}, got {value}")
    return value


def unique_labels(labels: Sequence) -> np.ndarray:
    classes = np.unique(np.asarray(labels))
    if classes.size < 2:
        raise ValidationError(f"need at least two classes, got {classes.size}")
    return classes
