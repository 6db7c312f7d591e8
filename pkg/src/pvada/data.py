"""Synthetic labelled shapes and point-cloud file I/O.

Binary cloud file (``.pcld``), all little-endian::

    offset  size  field
    0       5     magic b"PCLD1"
    5       4     uint32 point count N
    9       1     uint8 label flag (1 = label present)
    10      4     int32 label (0 when absent)
    14      12N   float32 x, y, z per point

Text clouds (``.xyz`` / ``.txt``) hold one ``x y z`` triple per line;
blank lines and lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import CloudFormatError, ValidationError
from .geometry import PointCloud, normalize_unit_sphere

__all__ = [
    "ShapeClass", "SHAPES", "DEFAULT_CLASSES", "sample_shape", "generate_dataset",
    "read_cloud", "write_cloud", "read_xyz", "write_xyz", "write_split", "read_split",
    "write_dataset", "read_class_names",
]

MAGIC = b"PCLD1"
_HEADER = struct.Struct("<5sIBi")

TORUS_RADIUS = 1.0
TORUS_TUBE = 0.3


# ---------------------------------------------------------------------------
# Shape samplers (raw surfaces, before rotation / anisotropy / normalization)
# ---------------------------------------------------------------------------


def _sphere(n, rng):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def _cylinder(n, rng):
    # lateral area 4*pi, two caps pi each
    lateral = rng.random(n) < 4.0 / 6.0
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(lateral, 1.0, np.sqrt(rng.random(n)))
    z = np.where(lateral, rng.uniform(-1, 1, size=n), np.where(rng.random(n) < 0.5, -1.0, 1.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cone(n, rng):
    # apex at z=1, base radius 1 at z=-1; lateral area pi*sqrt(5), base pi
    lateral = rng.random(n) < np.sqrt(5) / (np.sqrt(5) + 1)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.random(n))
    r = t
    z = np.where(lateral, 1.0 - 2.0 * t, -1.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(n, rng):
    out = np.empty((0, 3))
    big, small = TORUS_RADIUS, TORUS_TUBE
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to (R + r cos v)
        accept = rng.random(m) * (big + small) < big + small * np.cos(v)
        u, v = u[accept], v[accept]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
    return out[:n]


def _plane_cross(n, rng):
    uv = rng.uniform(-1, 1, size=(n, 2))
    zeros = np.zeros(n)
    first = rng.random(n) < 0.5
    a = np.stack([uv[:, 0], zeros, uv[:, 1]], axis=1)
    b = np.stack([zeros, uv[:, 0], uv[:, 1]], axis=1)
    return np.where(first[:, None], a, b)


@dataclass(frozen=True)
class ShapeClass:
    name: str
    sampler: Callable[[int, np.random.Generator], np.ndarray]


SHAPES = {
    s.name: s for s in (
        ShapeClass("sphere", _sphere),
        ShapeClass("cube", _cube),
        ShapeClass("cylinder", _cylinder),
        ShapeClass("cone", _cone),
        ShapeClass("torus", _torus),
        ShapeClass("plane_cross", _plane_cross),
    )
}
DEFAULT_CLASSES = tuple(SHAPES)


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw surface samples of a named shape (no rotation, anisotropy or normalization)."""
    if name not in SHAPES:
        raise ValidationError(f"unknown shape class {name!r} (known: {', '.join(SHAPES)})")
    return SHAPES[name].sampler(n, rng)


def _instance(name: str, n: int, rng: np.random.Generator, anisotropy: float) -> np.ndarray:
    raw = sample_shape(name, n, rng)
    raw = raw * rng.uniform(1 - anisotropy, 1 + anisotropy, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return raw @ rot.T


def generate_dataset(
    classes: Sequence[str] = DEFAULT_CLASSES,
    per_class: int = 100,
    n_points: int = 1024,
    seed: int = 0,
    anisotropy: float = 0.2,
    train_fraction: float = 0.8,
) -> tuple[list[PointCloud], list[PointCloud]]:
    """Sample ``per_class`` normalized clouds per class and split them 80/20.

    Each cloud gets a random rotation about the z axis and a random
    per-axis stretch in ``[1 - anisotropy, 1 + anisotropy]``.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ValidationError("need at least two classes")
    for name in classes:
        if name not in SHAPES:
            raise ValidationError(f"unknown shape class {name!r} (known: {', '.join(SHAPES)})")
    if per_class < 2:
        raise ValidationError(f"per_class must be >= 2, got {per_class}")
    if n_points < 8:
        raise ValidationError(f"n_points must be >= 8, got {n_points}")
    n_train = int(round(per_class * train_fraction))
    train, test = [], []
    for label, name in enumerate(classes):
        clouds = []
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            clouds.append(normalize_unit_sphere(PointCloud(_instance(name, n_points, rng, anisotropy), label)))
        order = np.random.default_rng([seed, label, per_class]).permutation(per_class)
        train.extend(clouds[j] for j in order[:n_train])
        test.extend(clouds[j] for j in order[n_train:])
    return train, test


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix.lower() in (".xyz", ".txt"):
        write_xyz(path, cloud)
        return
    has_label = cloud.label is not None
    header = _HEADER.pack(MAGIC, len(cloud), int(has_label), cloud.label if has_label else 0)
    payload = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def read_cloud(path) -> PointCloud:
    """Read a ``.pcld`` binary cloud, or a text cloud for ``.xyz`` / ``.txt`` files."""
    path = Path(path)
    if path.suffix.lower() in (".xyz", ".txt"):
        return read_xyz(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CloudFormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}",
                               position=f"byte {len(raw)}")
    magic, n, flag, label = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CloudFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}", position="byte 0")
    if flag not in (0, 1):
        raise CloudFormatError(f"{path}: bad label flag {flag}", position="byte 9")
    expected = _HEADER.size + 12 * n
    if len(raw) != expected:
        kind = "truncated payload" if len(raw) < expected else "trailing bytes"
        raise CloudFormatError(f"{path}: {kind}, expected {expected} bytes for {n} points, got {len(raw)}",
                               position=f"byte {min(len(raw), expected)}")
    if n == 0:
        raise CloudFormatError(f"{path}: declares zero points", position="byte 5")
    points = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=_HEADER.size).reshape(n, 3).astype(np.float32)
    try:
        return PointCloud(points, label if flag else None)
    except ValidationError as exc:
        raise CloudFormatError(f"{path}: {exc}", position=f"byte {_HEADER.size}") from None


def read_xyz(path, label: Optional[int] = None) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 3:
                raise CloudFormatError(f"{path}: expected 3 values, found {len(fields)}", position=f"line {lineno}")
            try:
                rows.append([float(x) for x in fields])
            except ValueError:
                raise CloudFormatError(f"{path}: non-numeric value in {text!r}", position=f"line {lineno}") from None
    if not rows:
        raise CloudFormatError(f"{path}: no points found")
    return PointCloud(np.array(rows), label)


def write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points.tolist():
            f.write(f"{x!r} {y!r} {z!r}\n")


def write_split(directory, clouds: Sequence[PointCloud], class_names: Sequence[str]) -> None:
    """Write ``<directory>/<class>/<index>.pcld``; index counts within the split."""
    directory = Path(directory)
    for i, cloud in enumerate(clouds):
        name = class_names[cloud.label] if cloud.label is not None else "unlabeled"
        target = directory / name
        target.mkdir(parents=True, exist_ok=True)
        write_cloud(target / f"{i:05d}.pcld", cloud)


def read_split(directory) -> list[PointCloud]:
    """Read every cloud under ``directory`` in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    files = sorted(directory.glob("*/*.pcld"), key=lambda p: (int(p.stem), p.parent.name))
    if not files:
        raise ValidationError(f"no .pcld files under {directory}")
    return [read_cloud(p) for p in files]


def write_dataset(root, train: Sequence[PointCloud], test: Sequence[PointCloud], class_names: Sequence[str]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.json").write_text(json.dumps(list(class_names)) + "\n")
    write_split(root / "train", train, class_names)
    write_split(root / "test", test, class_names)


def read_class_names(root) -> list[str]:
    path = Path(root) / "classes.json"
    if not path.exists():
        raise ValidationError(f"missing {path}")
    return json.loads(path.read_text())
