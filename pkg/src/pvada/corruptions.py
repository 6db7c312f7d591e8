"""Seven atomic point-cloud corruptions at five severity levels.

Every corruption is a pure function of ``(cloud, CorruptionSpec)``: the
random stream is seeded from the CorruptionSpec alone, so any single corrupted
cloud can be regenerated without producing the rest of a suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .geometry import PointCloud, knn, normalize_unit_sphere

__all__ = [
    "CorruptionKind", "CorruptionSpec", "CorruptionParams", "ATOMIC_KINDS",
    "corrupt", "corruption_suite", "derive_seed", "expected_count",
]


class CorruptionKind(str, enum.Enum):
    SCALE = "scale"
    JITTER = "jitter"
    DROP_GLOBAL = "drop_global"
    DROP_LOCAL = "drop_local"
    ADD_GLOBAL = "add_global"
    ADD_LOCAL = "add_local"
    ROTATE = "rotate"
    CLEAN = "clean"

    @classmethod
    def parse(cls, value) -> "CorruptionKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValidationError(f"unknown corruption kind {value!r} (expected one of {names})") from None


# column order used by every results table
ATOMIC_KINDS = (
    CorruptionKind.SCALE, CorruptionKind.JITTER, CorruptionKind.DROP_GLOBAL,
    CorruptionKind.DROP_LOCAL, CorruptionKind.ADD_GLOBAL, CorruptionKind.ADD_LOCAL,
    CorruptionKind.ROTATE,
)
_KIND_CODE = {k: i for i, k in enumerate(CorruptionKind)}
SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        kind = CorruptionKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is CorruptionKind.CLEAN:
            if self.severity is not None:
                raise ValidationError("the clean set carries no severity")
        elif self.severity is None or int(self.severity) != self.severity or not 1 <= self.severity <= 5:
            raise ValidationError(f"severity must be an integer in [1, 5], got {self.severity!r}")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def name(self) -> str:
        return self.kind.value if self.severity is None else f"{self.kind.value}_{self.severity}"


@dataclass(frozen=True)
class CorruptionParams:
    """Per-severity magnitudes. Every value scales linearly with severity ``s``."""

    jitter_sigma: float = 0.01           # noise std = jitter_sigma * s
    scale_step: float = 0.1              # factor in [1/(1+step*s), 1+step*s]
    rotate_degrees: float = 6.0          # angle in [0, rotate_degrees * s]
    drop_local_points: int = 100         # removed = drop_local_points * s
    add_local_points: int = 100          # added = add_local_points * s
    add_local_sigma: float = 0.05
    add_global_points: int = 10          # added = add_global_points * s
    drop_global_ratio: float = 0.15      # kept = round(N * (1 - ratio * s))
    max_clusters: int = 8
    renormalize: tuple = field(default=(CorruptionKind.SCALE,))


DEFAULT_PARAMS = CorruptionParams()


def expected_count(n: int, kind, severity: Optional[int], params: CorruptionParams = DEFAULT_PARAMS) -> int:
    """Number of points ``corrupt`` returns for an ``n``-point input."""
    kind = CorruptionKind.parse(kind)
    s = severity or 0
    if kind is CorruptionKind.DROP_LOCAL:
        return n - params.drop_local_points * s
    if kind is CorruptionKind.ADD_LOCAL:
        return n + params.add_local_points * s
    if kind is CorruptionKind.DROP_GLOBAL:
        return int(round(n * (1 - params.drop_global_ratio * s)))
    if kind is CorruptionKind.ADD_GLOBAL:
        return n + params.add_global_points * s
    return n


def derive_seed(seed: int, kind, severity: Optional[int], index: int) -> int:
    """Stable 64-bit seed for one cloud of one corrupted set."""
    kind = CorruptionKind.parse(kind)
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _KIND_CODE[kind], severity or 0, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(spec: CorruptionSpec) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, _KIND_CODE[spec.kind], spec.severity or 0]))


def _split_total(total: int, max_parts: int, rng: np.random.Generator) -> list[int]:
    """Random positive cluster sizes that sum exactly to ``total``."""
    parts = int(rng.integers(1, min(max_parts, total) + 1))
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate(([0], cuts, [total]))).tolist()


def _random_rotation(max_degrees: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def _uniform_ball(n: int, rng: np.random.Generator) -> np.ndarray:
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * rng.random((n, 1)) ** (1.0 / 3.0)


def corrupt(cloud: PointCloud, spec: CorruptionSpec, params: CorruptionParams = DEFAULT_PARAMS) -> PointCloud:
    """Apply one atomic corruption. The label is carried over unchanged."""
    kind, s = spec.kind, spec.severity
    pts = cloud.points
    n = pts.shape[0]
    if kind is CorruptionKind.CLEAN:
        return cloud.with_points(pts.copy())
    rng = _rng(spec)

    if kind is CorruptionKind.JITTER:
        out = pts + rng.normal(0.0, params.jitter_sigma * s, size=pts.shape)
    elif kind is CorruptionKind.SCALE:
        hi = 1 + params.scale_step * s
        out = pts * rng.uniform(1 / hi, hi, size=3)
    elif kind is CorruptionKind.ROTATE:
        out = pts @ _random_rotation(params.rotate_degrees * s, rng).T
    elif kind is CorruptionKind.DROP_GLOBAL:
        keep = expected_count(n, kind, s, params)
        if keep < 1:
            raise ValidationError(f"drop_global severity {s} would remove all {n} points")
        out = pts[np.sort(rng.choice(n, size=keep, replace=False))]
    elif kind is CorruptionKind.DROP_LOCAL:
        out = pts[_drop_local_keep(pts, params.drop_local_points * s, params.max_clusters, rng)]
    elif kind is CorruptionKind.ADD_LOCAL:
        out = np.concatenate([pts, _add_local(pts, params.add_local_points * s, params, rng)])
    elif kind is CorruptionKind.ADD_GLOBAL:
        out = np.concatenate([pts, _uniform_ball(params.add_global_points * s, rng)])
    else:  # pragma: no cover - enum is exhaustive
        raise ValidationError(f"unsupported corruption {kind}")

    out = out.astype(pts.dtype, copy=False)
    result = cloud.with_points(out)
    if kind in params.renormalize:
        result = normalize_unit_sphere(result)
    return result


def _drop_local_keep(pts: np.ndarray, total: int, max_clusters: int, rng) -> np.ndarray:
    n = pts.shape[0]
    if total >= n:
        raise ValidationError(f"drop_local would remove {total} of {n} points")
    alive = np.ones(n, dtype=bool)
    for size in _split_total(total, max_clusters, rng):
        remaining = np.flatnonzero(alive)
        center = pts[remaining[rng.integers(len(remaining))]]
        nearest = knn(center[None, :], pts[remaining], size)[0]
        alive[remaining[nearest]] = False
    return np.flatnonzero(alive)


def _add_local(pts: np.ndarray, total: int, params: CorruptionParams, rng) -> np.ndarray:
    blobs = []
    for size in _split_total(total, params.max_clusters, rng):
        center = pts[rng.integers(pts.shape[0])]
        blobs.append(center + rng.normal(0.0, params.add_local_sigma, size=(size, 3)))
    return np.concatenate(blobs)


def corruption_suite(
    clouds: Sequence[PointCloud],
    seed: int = 0,
    params: CorruptionParams = DEFAULT_PARAMS,
    kinds: Sequence = ATOMIC_KINDS,
    severities: Sequence[int] = SEVERITIES,
    include_clean: bool = True,
) -> Iterator[tuple[CorruptionSpec, list[PointCloud]]]:
    """Yield the clean set (first) and then every (kind, severity) corrupted set.

    Each yielded spec carries the suite seed; the per-cloud seeds are derived
    with :func:`derive_seed` from ``(seed, kind, severity, index)``.
    """
    if not clouds:
        raise ValidationError("corruption_suite needs at least one cloud")
    if include_clean:
        yield CorruptionSpec(CorruptionKind.CLEAN, seed=seed), [c.with_points(c.points.copy()) for c in clouds]
    for kind in kinds:
        kind = CorruptionKind.parse(kind)
        for s in severities:
            specs = [CorruptionSpec(kind, s, derive_seed(seed, kind, s, i)) for i in range(len(clouds))]
            yield CorruptionSpec(kind, s, seed), [corrupt(c, sp, params) for c, sp in zip(clouds, specs)]
