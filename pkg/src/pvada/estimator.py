"""scikit-learn style wrappers: a classifier and two cloud transformers.

``X`` is always a collection of point clouds (``B x N x 3`` array, or a
list of ``N x 3`` arrays / :class:`PointCloud` objects of varying size),
so these estimators plug into ``Pipeline`` and ``clone`` but not into
tools that assume a 2-D feature matrix.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .corruptions import CorruptionKind, CorruptionSpec, corrupt, derive_seed
from .exceptions import ValidationError
from .geometry import normalize_unit_sphere
from .model import ModelConfig
from .training import TrainConfig, predict_logits, train
from .validation import check_clouds, unique_labels

__all__ = ["PVAdaClassifier", "UnitSphereNormalizer", "Corruptor"]

_MODEL_KEYS = (
    "k", "dim", "num_oa_blocks", "voxel_size", "num_voxelizations", "interaction", "shared_weights",
    "afa_enabled", "leaky_slope", "head_dims", "head_dropout", "progressive", "attention_double_norm",
)
_TRAIN_KEYS = (
    "epochs", "batch_size", "micro_batch", "lr", "momentum", "weight_decay", "t_max", "eta_min",
    "label_smoothing", "augment", "select_best_on", "eval_every", "dtype",
)


class PVAdaClassifier(ClassifierMixin, BaseEstimator):
    """Point-voxel transformer classifier.

    Labels may be of any hashable type; they are encoded to ``0..C-1`` in
    sorted order (``classes_``). ``eval_set`` in :meth:`fit` supplies the
    validation sets used for best-epoch selection; without it the training
    clouds themselves (unaugmented) serve as the clean validation set.
    """

    def __init__(
        self,
        k=32,
        dim=128,
        num_oa_blocks=4,
        voxel_size=0.05,
        num_voxelizations=2,
        interaction="z1",
        shared_weights=True,
        afa_enabled=True,
        leaky_slope=0.01,
        head_dims=(512, 256),
        head_dropout=0.5,
        progressive=True,
        attention_double_norm=False,
        epochs=350,
        batch_size=64,
        micro_batch=8,
        lr=0.1,
        momentum=0.9,
        weight_decay=0.0005,
        t_max=350,
        eta_min=0.001,
        label_smoothing=0.2,
        augment=True,
        select_best_on="corrupted_val",
        eval_every=1,
        dtype="float32",
        random_state=0,
        n_jobs=1,
    ):
        self.k = k
        self.dim = dim
        self.num_oa_blocks = num_oa_blocks
        self.voxel_size = voxel_size
        self.num_voxelizations = num_voxelizations
        self.interaction = interaction
        self.shared_weights = shared_weights
        self.afa_enabled = afa_enabled
        self.leaky_slope = leaky_slope
        self.head_dims = head_dims
        self.head_dropout = head_dropout
        self.progressive = progressive
        self.attention_double_norm = attention_double_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.t_max = t_max
        self.eta_min = eta_min
        self.label_smoothing = label_smoothing
        self.augment = augment
        self.select_best_on = select_best_on
        self.eval_every = eval_every
        self.dtype = dtype
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _configs(self, num_classes: int) -> tuple[ModelConfig, TrainConfig]:
        model = ModelConfig(num_classes=num_classes, **{k: getattr(self, k) for k in _MODEL_KEYS})
        seed = 0 if self.random_state is None else int(self.random_state)
        trainer = TrainConfig(seed=seed, **{k: getattr(self, k) for k in _TRAIN_KEYS})
        return model, trainer

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        unknown = ~np.isin(y, self.classes_)
        if unknown.any():
            raise ValidationError(f"labels not seen during fit: {sorted(set(y[unknown].tolist()))}")
        return np.searchsorted(self.classes_, y)

    def fit(self, X, y, eval_set=None):
        """Train on clouds ``X`` with labels ``y``.

        ``eval_set`` is ``(X_val, y_val)`` or a mapping ``name -> (X_val, y_val)``;
        a set named ``"clean"`` counts as the clean validation set.
        """
        y = np.asarray(y)
        if y.ndim != 1:
            raise ValidationError(f"y must be one-dimensional, got shape {y.shape}")
        self.classes_ = unique_labels(y)
        clouds = check_clouds(X, self._encode(y))
        if eval_set is None:
            sets = {"clean": clouds}
        else:
            pairs = eval_set if isinstance(eval_set, dict) else {"clean": eval_set}
            sets = {name: check_clouds(Xv, self._encode(yv)) for name, (Xv, yv) in pairs.items()}
        model_config, train_config = self._configs(len(self.classes_))
        self.params_, self.history_ = train(clouds, sets, model_config, train_config, threads=self.n_jobs)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_logits(check_clouds(X), self.params_, threads=self.n_jobs)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        winners = self.decision_function(X).argmax(axis=1)
        return self.classes_[winners]

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, [str(c) for c in self.classes_], {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "PVAdaClassifier":
        """Rebuild a fitted classifier from a checkpoint (class names come back as strings)."""
        params, meta = load_checkpoint(path)
        saved = meta.get("extra", {}).get("estimator", {})
        est = cls(**{k: v for k, v in saved.items() if k in cls._get_param_names()})
        for key in _MODEL_KEYS:
            setattr(est, key, getattr(params.config, key))
        classes = meta.get("classes") or list(range(params.config.num_classes))
        est.classes_ = np.asarray(classes)
        est.params_ = params
        est.history_ = []
        return est


class UnitSphereNormalizer(TransformerMixin, BaseEstimator):
    """Center each cloud and scale it into the unit sphere (stateless)."""

    def fit(self, X, y=None):
        check_clouds(X)
        return self

    def transform(self, X):
        return [normalize_unit_sphere(c) for c in check_clouds(X)]


class Corruptor(TransformerMixin, BaseEstimator):
    """Apply one atomic corruption; cloud ``i`` uses a seed derived from ``(seed, kind, severity, i)``."""

    def __init__(self, kind="jitter", severity=1, seed=0):
        self.kind = kind
        self.severity = severity
        self.seed = seed

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self._severity(), self.seed)
        check_clouds(X)
        return self

    def _severity(self) -> Optional[int]:
        return None if CorruptionKind.parse(self.kind) is CorruptionKind.CLEAN else self.severity

    def transform(self, X):
        severity = self._severity()
        out = []
        for i, cloud in enumerate(check_clouds(X)):
            spec = CorruptionSpec(self.kind, severity, derive_seed(self.seed, self.kind, severity, i))
            out.append(corrupt(cloud, spec))
        return out
