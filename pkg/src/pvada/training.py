"""Loss, optimizer, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .exceptions import NumericalError, ValidationError
from .geometry import PointCloud
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .tensor import Tensor, log_softmax, mul, no_grad, sum_over_axis

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "smoothed_targets", "label_smoothed_ce", "sgd_step", "SGD",
    "cosine_lr", "augment", "predict_logits", "predict", "evaluate_oa", "train",
    "EpochRecord",
]


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 64
    micro_batch: Optional[int] = 8
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    t_max: int = 350
    eta_min: float = 0.001
    label_smoothing: float = 0.2
    scale_range: tuple = (2.0 / 3.0, 3.0 / 2.0)
    translate_range: tuple = (-0.2, 0.2)
    augment: bool = True
    seed: int = 0
    select_best_on: str = "corrupted_val"
    eval_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        self.scale_range = tuple(float(x) for x in self.scale_range)
        self.translate_range = tuple(float(x) for x in self.translate_range)
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2 (the head normalizes over the batch), got {self.batch_size}")
        if self.micro_batch is not None and self.micro_batch < 2:
            raise ValidationError(f"micro_batch must be >= 2 or unset, got {self.micro_batch}")
        if self.lr <= 0 or self.eta_min <= 0 or self.t_max <= 0:
            raise ValidationError("lr, eta_min and t_max must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("momentum and weight_decay must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValidationError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        for name, (lo, hi) in (("scale_range", self.scale_range), ("translate_range", self.translate_range)):
            if lo > hi:
                raise ValidationError(f"{name} must be ordered, got {(lo, hi)}")
        if self.select_best_on not in ("clean_val", "corrupted_val"):
            raise ValidationError(f"select_best_on must be clean_val or corrupted_val, got {self.select_best_on!r}")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["translate_range"] = list(self.translate_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def smoothed_targets(labels, num_classes: int, alpha: float) -> np.ndarray:
    """``1 - alpha`` on the true class, ``alpha / (C - 1)`` on every other class."""
    labels = np.atleast_1d(np.asarray(labels))
    if num_classes < 2:
        raise ValidationError("label smoothing needs at least two classes")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"class index outside [0, {num_classes})")
    target = np.full((labels.size, num_classes), alpha / (num_classes - 1))
    target[np.arange(labels.size), labels] = 1.0 - alpha
    return target


def label_smoothed_ce(logits: Tensor, labels, alpha: float) -> Tensor:
    """Cross entropy against label-smoothed targets, averaged over the batch.

    ``logits`` is ``(C,)`` for one sample or ``(B, C)`` for a batch.
    """
    single = logits.ndim == 1
    c = logits.shape[-1]
    target = smoothed_targets(labels, c, alpha).astype(logits.dtype)
    if single:
        target = target[0]
    batch = 1 if single else logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    return mul(sum_over_axis(mul(logp, Tensor(target))), -1.0 / batch)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


def sgd_step(param: np.ndarray, grad: np.ndarray, buffer: Optional[np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """One heavy-ball step with L2 decay folded into the gradient.

    ``buffer <- momentum * buffer + (grad + weight_decay * param)``;
    ``param <- param - lr * buffer``. Returns the new ``(param, buffer)``.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise ValidationError(f"sgd_step: gradient {grad.shape} does not match parameter {param.shape}")
    d = grad + weight_decay * param
    buffer = d if buffer is None else momentum * buffer + d
    return param - lr * buffer, buffer


class SGD:
    """Momentum SGD over a list of parameter tensors; buffers start at zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list = [None] * len(self.params)

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            new, self.buffers[i] = sgd_step(p.data, p.grad, self.buffers[i], lr, self.momentum, self.weight_decay)
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(epoch: float, lr0: float, t_max: float, eta_min: float) -> float:
    if not 0 <= epoch <= t_max:
        raise ValidationError(f"epoch {epoch} outside [0, {t_max}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * epoch / t_max))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def augment(cloud: PointCloud, rng: np.random.Generator, scale_range=(2 / 3, 3 / 2),
            translate_range=(-0.2, 0.2), extra: Sequence[Callable] = ()) -> PointCloud:
    """Random per-axis scaling followed by random per-axis translation.

    ``extra`` transforms (``(cloud, rng) -> cloud``) run afterwards in order.
    """
    scale = rng.uniform(scale_range[0], scale_range[1], size=3)
    shift = rng.uniform(translate_range[0], translate_range[1], size=3)
    out = cloud.with_points(cloud.points * scale + shift)
    for fn in extra:
        out = fn(out, rng)
    return out


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------


def _logits_chunk(clouds, params):
    with no_grad():
        logits, _ = forward_batch(clouds, params, training=False)
    return logits.data


def predict_logits(clouds: Sequence, params: ModelParams, threads: int = 1, chunk: int = 16) -> np.ndarray:
    """Inference-mode logits, ``len(clouds) x C``."""
    if not clouds:
        return np.zeros((0, params.config.num_classes))
    chunks = [clouds[i:i + chunk] for i in range(0, len(clouds), chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _logits_chunk(c, params), chunks))
    else:
        parts = [_logits_chunk(c, params) for c in chunks]
    return np.concatenate(parts, axis=0)


def predict(clouds: Sequence, params: ModelParams, threads: int = 1) -> np.ndarray:
    return predict_logits(clouds, params, threads).argmax(axis=1)


def evaluate_oa(clouds: Sequence[PointCloud], params: ModelParams, threads: int = 1) -> float:
    from .metrics import overall_accuracy

    labels = [c.label for c in clouds]
    return overall_accuracy(predict(clouds, params, threads).tolist(), labels)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_oa: Optional[float]
    set_oa: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _batches(order: np.ndarray, size: int) -> list:
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # a single-cloud batch has no batch statistics for the head's normalization
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _selection_score(set_oa: Mapping[str, float], target: str) -> float:
    if target == "clean_val":
        if "clean" not in set_oa:
            raise ValidationError("select_best_on=clean_val needs a validation set named 'clean'")
        return set_oa["clean"]
    corrupted = [v for k, v in set_oa.items() if k != "clean"]
    return float(np.mean(corrupted if corrupted else list(set_oa.values())))


def train(
    train_set: Sequence[PointCloud],
    val_sets: Mapping[str, Sequence[PointCloud]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    init: Optional[ModelParams] = None,
    extra_augmentations: Sequence[Callable] = (),
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    threads: int = 1,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Train and return the parameters of the best-validation epoch plus the history.

    Each mini-batch is run in micro-batches of ``micro_batch`` clouds whose
    gradients are summed before the optimizer step; normalization layers
    see one micro-batch at a time.

    ``val_sets`` maps a set name to labelled clouds; the set named
    ``"clean"`` is the clean validation set, every other set counts as
    corrupted.
    """
    if not train_set:
        raise ValidationError("training set is empty")
    if not val_sets or any(len(v) == 0 for v in val_sets.values()):
        raise ValidationError("need at least one non-empty validation set")
    if any(c.label is None for c in train_set):
        raise ValidationError("every training cloud needs a label")
    if len(train_set) < 2:
        raise ValidationError("need at least two training clouds to form a batch")
    cfg = train_config
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    params = init.astype(dtype) if init is not None else init_params(model_config, rng, dtype)
    optimizer = SGD(params.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    labels = np.array([c.label for c in train_set])

    best, best_score, history = params.copy(), -np.inf, []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(min(epoch, cfg.t_max), cfg.lr, cfg.t_max, cfg.eta_min)
        losses = []
        for b, idx in enumerate(_batches(rng.permutation(len(train_set)), cfg.batch_size)):
            clouds = [train_set[i] for i in idx]
            if cfg.augment:
                clouds = [augment(c, rng, cfg.scale_range, cfg.translate_range, extra_augmentations) for c in clouds]
            optimizer.zero_grad()
            value = 0.0
            for part in _batches(np.arange(len(idx)), cfg.micro_batch or len(idx)):
                logits, _ = forward_batch([clouds[i] for i in part], params, training=True, rng=rng)
                loss = mul(label_smoothed_ce(logits, labels[idx[part]], cfg.label_smoothing), len(part) / len(idx))
                value += loss.item()
                if not np.isfinite(value):
                    raise NumericalError("non-finite training loss", epoch=epoch, batch=b, lr=lr)
                loss.backward()
            optimizer.step(lr)
            losses.append(value)

        val_oa, set_oa = None, {}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            set_oa = {name: evaluate_oa(clouds, params, threads) for name, clouds in val_sets.items()}
            val_oa = _selection_score(set_oa, cfg.select_best_on)
            if val_oa > best_score:
                best, best_score = params.copy(), val_oa
        record = EpochRecord(epoch, lr, float(np.mean(losses)), val_oa, set_oa)
        history.append(record)
        logger.info("epoch %d lr %.5f loss %.4f val_oa %s", epoch, lr, record.train_loss, val_oa)
        if on_epoch is not None:
            on_epoch(record)
    return best, history
