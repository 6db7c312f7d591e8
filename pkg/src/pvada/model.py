"""Point-voxel classification network with adaptive feature abstraction.

The forward pass for one cloud:

1. sort the points canonically and build a voxel pyramid ``X -> X' (v) -> X'' (2v)``;
2. per level: local encoding (kNN edge features, two linear/norm/ReLU
   stages, max over neighbors), optional fine-to-coarse feature
   interaction, an embedding layer, four offset-attention blocks, and a
   fusion layer producing ``N x 4D`` features;
3. per level: score-weighted max pooling with a level-specific score head;
4. the pooled vectors of all levels are concatenated and classified by an MLP.

Parameters live in :class:`ModelParams`, a flat name -> tensor mapping;
the layers below look their weights up by name prefix.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .geometry import PointCloud, canonical_order, knn, voxel_downsample
from .tensor import (
    BatchNormState, Tensor, batch_norm, concat, dropout, gather_rows, leaky_relu, matmul,
    max_over_axis, mul, pointwise_linear, relu, reshape, segment_mean, softmax,
    sum_over_axis, transpose,
)

__all__ = [
    "ModelConfig", "ModelParams", "LevelFeatures", "FeatureBundle", "init_params",
    "local_encode", "offset_attention_block", "fuse_transformer_features",
    "interact_features", "adaptive_pool", "build_pyramid", "forward", "forward_batch",
    "count_parameters", "REFERENCE_PARAMETER_COUNT", "Segments", "edge_features", "encode",
]

INTERACTIONS = ("z1", "z2", "z3")
REFERENCE_PARAMETER_COUNT = 3.16e6


@dataclass
class ModelConfig:
    k: int = 32
    dim: int = 128
    num_oa_blocks: int = 4
    voxel_size: float = 0.05
    num_voxelizations: int = 2
    interaction: Optional[str] = "z1"
    shared_weights: bool = True
    afa_enabled: bool = True
    num_classes: int = 40
    leaky_slope: float = 0.01
    head_dims: tuple = (512, 256)
    head_dropout: float = 0.5
    progressive: bool = True
    attention_double_norm: bool = False
    qk_divisor: int = 4

    def __post_init__(self):
        self.head_dims = tuple(int(h) for h in self.head_dims)
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_voxelizations not in (0, 1, 2, 3):
            raise ValidationError(f"num_voxelizations must be in 0..3, got {self.num_voxelizations}")
        if self.interaction is not None and self.interaction not in INTERACTIONS:
            raise ValidationError(f"interaction must be one of {INTERACTIONS} or None, got {self.interaction!r}")
        if self.voxel_size <= 0:
            raise ValidationError(f"voxel_size must be positive, got {self.voxel_size}")
        if not 0 <= self.head_dropout < 1:
            raise ValidationError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        if self.num_oa_blocks < 1 or self.qk_divisor < 1:
            raise ValidationError("num_oa_blocks and qk_divisor must be >= 1")

    @property
    def num_levels(self) -> int:
        return self.num_voxelizations + 1

    @property
    def qk_dim(self) -> int:
        return max(1, self.dim // self.qk_divisor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Learned tensors plus normalization running statistics, keyed by name."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named_parameters(self):
        return list(self.tensors.items())

    def parameters(self) -> list:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        tensors = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        return ModelParams(copy.deepcopy(self.config), tensors, copy.deepcopy(self.norms))

    def astype(self, dtype) -> "ModelParams":
        tensors = {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        norms = {
            n: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype), s.momentum)
            for n, s in self.norms.items()
        }
        return ModelParams(copy.deepcopy(self.config), tensors, norms)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.tensors: dict = {}
        self.norms: dict = {}

    def _add(self, name, arr):
        self.tensors[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def linear(self, name: str, c_in: int, c_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(c_in)
        self._add(f"{name}.weight", self.rng.uniform(-bound, bound, size=(c_in, c_out)))
        if bias:
            self._add(f"{name}.bias", self.rng.uniform(-bound, bound, size=c_out))

    def unit(self, name: str, c_in: int, c_out: int):
        # the linear map feeding a normalization carries no bias: the norm's shift subsumes it
        self.linear(name, c_in, c_out, bias=False)
        self._add(f"{name}.bn.gamma", np.ones(c_out))
        self._add(f"{name}.bn.beta", np.zeros(c_out))
        self.norms[f"{name}.bn"] = BatchNormState.fresh(c_out, self.dtype)


def _encoder_prefix(config: ModelConfig, level: int) -> str:
    return "enc" if config.shared_weights else f"enc{level}"


def init_params(config: ModelConfig, seed=0, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights, unit norm scales, score heads at weight 0 / bias 1."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = _Builder(rng, dtype)
    d = config.dim
    encoders = [0] if config.shared_weights else list(range(config.num_levels))
    for level in encoders:
        p = _encoder_prefix(config, level)
        b.unit(f"{p}.le1", 6, d)
        b.unit(f"{p}.le2", d, d)
        b.unit(f"{p}.embed", d, d)
        for i in range(1, config.num_oa_blocks + 1):
            b.linear(f"{p}.oa{i}.q", d, config.qk_dim, bias=False)
            b.linear(f"{p}.oa{i}.k", d, config.qk_dim, bias=False)
            b.linear(f"{p}.oa{i}.v", d, d)
            b.unit(f"{p}.oa{i}.f", d, d)
        b.unit(f"{p}.fuse", (config.num_oa_blocks + 1) * d, 4 * d)
    for level in range(1, config.num_levels):
        if config.interaction == "z2":
            b.unit(f"inter{level}.h1", d, d)
        elif config.interaction == "z3":
            b.unit(f"inter{level}.h2", d, d)
            b.unit(f"inter{level}.h3", 2 * d, d)
    for level in range(config.num_levels):
        b._add(f"score{level}.weight", np.zeros((4 * d, 1)))
        b._add(f"score{level}.bias", np.ones(1))
    width = 4 * d * config.num_levels
    for j, h in enumerate(config.head_dims, start=1):
        b.unit(f"head.fc{j}", width, h)
        width = h
    b.linear("head.out", width, config.num_classes)
    return ModelParams(config, b.tensors, b.norms)


def count_parameters(config: ModelConfig) -> int:
    return init_params(config, seed=0, dtype=np.float32).num_parameters()


# ---------------------------------------------------------------------------
# Segments: several clouds stacked row-wise
# ---------------------------------------------------------------------------


@dataclass
class Segments:
    """Row ranges of the clouds stacked in one feature matrix."""

    sizes: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        width = int(self.sizes.max())
        pos = np.arange(width)
        self.valid = pos[None, :] < self.sizes[:, None]
        # padded slots read the cloud's first row; masking keeps them out of every result
        self.pad_index = np.where(self.valid, self.offsets[:, None] + pos[None, :], self.offsets[:, None])
        self.flat_valid = np.flatnonzero(self.valid.ravel())

    @classmethod
    def single(cls, n: int) -> "Segments":
        return cls(np.array([n]))

    @property
    def count(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def is_dense(self) -> bool:
        return bool(self.valid.all())

    def pad(self, x: Tensor) -> Tensor:
        """``(total, C)`` -> ``(count, width, C)``."""
        if self.count == 1:
            return reshape(x, (1,) + x.shape)
        return gather_rows(x, self.pad_index)

    def unpad(self, x: Tensor) -> Tensor:
        """``(count, width, C)`` -> ``(total, C)``."""
        flat = reshape(x, (-1,) + x.shape[2:])
        return flat if self.is_dense else gather_rows(flat, self.flat_valid)

    def key_mask(self, dtype) -> Optional[np.ndarray]:
        """Additive mask, ``-inf`` on padded slots, shaped ``(count, 1, width)``."""
        if self.is_dense:
            return None
        return np.where(self.valid, 0.0, -np.inf).astype(dtype)[:, None, :]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.count), self.sizes)


def _segments(sizes) -> Segments:
    return sizes if isinstance(sizes, Segments) else Segments(sizes)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _linear(params: ModelParams, name: str, x) -> Tensor:
    bias = params.tensors.get(f"{name}.bias")
    return pointwise_linear(x, params[f"{name}.weight"], bias)


def _unit(params: ModelParams, name: str, x, training: bool, act: Callable) -> Tensor:
    """linear -> batch norm -> activation"""
    y = _linear(params, name, x)
    y = batch_norm(y, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"], params.norms[f"{name}.bn"], training)
    return act(y)


def edge_features(points: np.ndarray, k: int) -> np.ndarray:
    """``N x k x 6`` array of ``[neighbor - center, center]`` over the k nearest neighbors."""
    pts = np.asarray(points, dtype=np.float64)
    idx = knn(pts, pts, k)
    center = np.broadcast_to(pts[:, None, :], idx.shape + (3,))
    return np.concatenate([pts[idx] - center, center], axis=-1)


def local_encode(points, params: ModelParams, prefix: str = "enc", training: bool = False) -> Tensor:
    """Coordinates -> ``N x D`` local descriptors.

    Each point's k nearest neighbors (itself included) form edge features
    ``[neighbor - center, center]`` which pass through two
    linear/norm/ReLU stages and are max-pooled over the neighborhood.
    ``points`` is one ``N x 3`` array or a list of them; descriptors of a
    list are stacked row-wise in order.
    """
    clouds = points if isinstance(points, (list, tuple)) else [points]
    edges = np.concatenate([edge_features(p, params.config.k) for p in clouds]).astype(params.dtype)
    h = _unit(params, f"{prefix}.le1", Tensor(edges), training, relu)
    h = _unit(params, f"{prefix}.le2", h, training, relu)
    out, _ = max_over_axis(h, axis=1)
    return out


def offset_attention_block(
    features: Tensor, params: ModelParams, prefix: str, training: bool = False, segments=None
) -> Tensor:
    """``F + f(F - attention(F))`` with single-head scaled dot-product attention.

    With ``segments`` the rows of ``features`` belong to several clouds and
    attention stays within each cloud.
    """
    config = params.config
    seg = Segments.single(features.shape[0]) if segments is None else _segments(segments)
    q = seg.pad(_linear(params, f"{prefix}.q", features))
    k = seg.pad(_linear(params, f"{prefix}.k", features))
    v = seg.pad(_linear(params, f"{prefix}.v", features))
    energy = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    mask = seg.key_mask(energy.dtype)
    if mask is not None:
        energy = energy + mask
    attn = softmax(energy, axis=-1)
    if config.attention_double_norm:
        if mask is not None:
            attn = mul(attn, seg.valid[:, :, None].astype(attn.dtype))
        attn = attn / (sum_over_axis(attn, axis=1, keepdims=True) + 1e-9)
        attended = matmul(transpose(attn), v)
    else:
        attended = matmul(attn, v)
    attended = seg.unpad(attended)
    return features + _unit(params, f"{prefix}.f", features - attended, training, relu)


def fuse_transformer_features(
    local: Tensor, blocks: Sequence[Tensor], params: ModelParams, prefix: str, training: bool = False
) -> Tensor:
    """Concatenate ``[local, block_1..block_n]`` and map to ``4D`` with linear/norm/LeakyReLU."""
    slope = params.config.leaky_slope
    stacked = concat([local, *blocks], axis=-1)
    return _unit(params, f"{prefix}.fuse", stacked, training, lambda t: leaky_relu(t, slope))


def interact_features(
    fine: Tensor,
    coarse: Tensor,
    assignment: np.ndarray,
    mode: Optional[str],
    h1: Optional[Callable] = None,
    h2: Optional[Callable] = None,
    h3: Optional[Callable] = None,
) -> Tensor:
    """Inject fine-level features into the coarse level.

    ``fine`` rows are first averaged per coarse cell (``assignment`` maps
    each fine row to its coarse row), then combined with ``coarse``:
    ``z1`` keeps ``coarse``, ``z2`` adds ``h1(fine)``, ``z3`` returns
    ``h3([h2(fine), coarse])``.
    """
    if mode is None or mode == "z1":
        return coarse
    assignment = np.asarray(assignment)
    if assignment.shape != (fine.shape[0],):
        raise ValidationError(f"assignment has {assignment.shape} entries for {fine.shape[0]} fine rows")
    pooled = segment_mean(fine, assignment, coarse.shape[0])
    if mode == "z2":
        return h1(pooled) + coarse
    if mode == "z3":
        return h3(concat([h2(pooled), coarse], axis=-1))
    raise ValidationError(f"unknown interaction mode {mode!r}")


def adaptive_pool(
    features: Tensor, weight: Optional[Tensor], bias: Optional[Tensor], segments=None
) -> tuple[Tensor, Optional[Tensor]]:
    """Score every point with a linear head and max-pool the score-weighted features.

    Returns ``(pooled, scores)``: ``pooled`` is ``(4D,)`` for one cloud or
    ``(B, 4D)`` when ``segments`` splits the rows into clouds; ``scores`` is
    ``N x 1``. With ``weight=None`` plain max pooling is applied and
    ``scores`` is ``None``.
    """
    scores = None
    weighted = features
    if weight is not None:
        scores = pointwise_linear(features, weight, bias)
        weighted = mul(scores, features)
    if segments is None:
        pooled, _ = max_over_axis(weighted, axis=0)
        return pooled, scores
    seg = _segments(segments)
    padded = seg.pad(weighted)
    mask = seg.key_mask(padded.dtype)
    if mask is not None:
        padded = padded + np.swapaxes(mask, 1, 2)
    pooled, _ = max_over_axis(padded, axis=1)
    return pooled, scores


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


@dataclass
class LevelFeatures:
    """One pyramid level of a batch; tensors stack the clouds row-wise per ``segments``."""

    points: list
    segments: Segments
    assignment: Optional[np.ndarray]
    local: Tensor
    embedded: Tensor
    blocks: list
    transformer: Tensor
    scores: Optional[Tensor]
    pooled: Tensor

    def rows(self, i: int) -> slice:
        start = int(self.segments.offsets[i])
        return slice(start, start + int(self.segments.sizes[i]))


@dataclass
class FeatureBundle:
    levels: list
    logits: Optional[Tensor] = None


def build_pyramid(points: np.ndarray, config: ModelConfig) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
    """Voxelize ``num_voxelizations`` times with sizes v, 2v, 4v.

    Returns ``(points, assignment)`` per level, where ``assignment`` maps the
    previous level's rows to this level's rows (``None`` for the input level).
    """
    levels = [(points, None)]
    base = PointCloud(points)
    for j in range(config.num_voxelizations):
        size = config.voxel_size * 2 ** j
        if config.progressive or j == 0:
            cloud, assignment = voxel_downsample(PointCloud(levels[-1][0]), size)
        else:
            cloud, from_input = voxel_downsample(base, size)
            # route each previous-level row through the first input point it summarizes
            prev_from_input = _input_assignment(levels, points)
            _, first = np.unique(prev_from_input, return_index=True)
            assignment = from_input[first]
        levels.append((cloud.points, assignment))
    return levels


def _input_assignment(levels, points) -> np.ndarray:
    mapping = np.arange(points.shape[0])
    for _, assignment in levels[1:]:
        mapping = assignment[mapping]
    return mapping


def _encode_level(level_points, assignment, params, level, training, fine_local):
    config = params.config
    prefix = _encoder_prefix(config, level)
    slope = config.leaky_slope
    seg = Segments([len(p) for p in level_points])
    local = local_encode(level_points, params, prefix, training)
    if fine_local is not None and config.interaction is not None:

        def unit(name):
            return lambda x: _unit(params, f"inter{level}.{name}", x, training, lambda t: leaky_relu(t, slope))

        local = interact_features(fine_local, local, assignment, config.interaction,
                                  unit("h1"), unit("h2"), unit("h3"))
    embedded = _unit(params, f"{prefix}.embed", local, training, relu)
    blocks, h = [], embedded
    for i in range(1, config.num_oa_blocks + 1):
        h = offset_attention_block(h, params, f"{prefix}.oa{i}", training, seg)
        blocks.append(h)
    fused = fuse_transformer_features(local, blocks, params, prefix, training)
    weight = params[f"score{level}.weight"] if config.afa_enabled else None
    bias = params[f"score{level}.bias"] if config.afa_enabled else None
    pooled, scores = adaptive_pool(fused, weight, bias, seg)
    return LevelFeatures(level_points, seg, assignment, local, embedded, blocks, fused, scores, pooled)


def _cloud_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points
    return pts[canonical_order(pts)]


def encode(clouds: Sequence, params: ModelParams, training: bool = False) -> FeatureBundle:
    """Run the point-voxel encoder on a batch of clouds (no classification head).

    Each cloud is sorted canonically and voxelized on its own; the clouds
    are then stacked so normalization layers see the whole batch.
    """
    pyramids = [build_pyramid(_cloud_points(c), params.config) for c in clouds]
    levels, fine_local = [], None
    for level in range(params.config.num_levels):
        level_points = [p[level][0] for p in pyramids]
        assignment = None
        if level > 0:
            prev = levels[-1].segments
            cur_offsets = np.concatenate([[0], np.cumsum([len(p) for p in level_points])[:-1]])
            assignment = np.concatenate(
                [p[level][1] + cur_offsets[i] for i, p in enumerate(pyramids)]
            ).astype(np.int64)
            assert len(assignment) == prev.total
        feats = _encode_level(level_points, assignment, params, level, training, fine_local)
        levels.append(feats)
        fine_local = feats.local
    return FeatureBundle(levels)


def _head(pooled_rows: Tensor, params: ModelParams, training: bool, rng) -> Tensor:
    config = params.config
    h = pooled_rows
    for j in range(1, len(config.head_dims) + 1):
        h = _unit(params, f"head.fc{j}", h, training, lambda t: leaky_relu(t, config.leaky_slope))
        h = dropout(h, config.head_dropout, rng, training)
    return _linear(params, "head.out", h)


def forward_batch(
    clouds: Sequence, params: ModelParams, training: bool = False, rng: Optional[np.random.Generator] = None
) -> tuple[Tensor, FeatureBundle]:
    """Logits ``B x C`` for a batch of clouds, plus every intermediate feature.

    In training mode every normalization layer uses statistics over the
    batch (all points of all clouds for the encoder, all clouds for the
    head), so training batches need at least two clouds.
    """
    if len(clouds) == 0:
        raise ValidationError("forward_batch needs at least one cloud")
    bundle = encode(clouds, params, training)
    pooled = concat([lv.pooled for lv in bundle.levels], axis=-1)
    bundle.logits = _head(pooled, params, training, rng)
    return bundle.logits, bundle


def forward(cloud, params: ModelParams, training: bool = False, rng=None) -> FeatureBundle:
    """Classify a single cloud; ``bundle.logits`` has shape ``(C,)``."""
    logits, bundle = forward_batch([cloud], params, training, rng)
    bundle.logits = reshape(logits, (-1,))
    return bundle
