"""Point-voxel transformer classification of point clouds with adaptive pooling,
an atomic-corruption benchmark and OA / CE / mCE evaluation, on numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .corruptions import ATOMIC_KINDS, SEVERITIES, CorruptionKind, CorruptionParams, CorruptionSpec, corrupt, corruption_suite
from .data import generate_dataset, read_cloud, write_cloud
from .estimator import Corruptor, PVAdaClassifier, UnitSphereNormalizer
from .exceptions import (
    BoundsError, CheckpointError, CloudFormatError, ContractError, NumericalError, PVAdaError, ShapeError,
    UndefinedBaselineError, ValidationError,
)
from .geometry import PointCloud, knn, normalize_unit_sphere, voxel_downsample
from .metrics import BaselineTable, EvalReport, build_report, corruption_error, mean_ce, overall_accuracy
from .model import ModelConfig, ModelParams, count_parameters, forward, forward_batch, init_params
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, label_smoothed_ce, train

__version__ = "0.1.0"

__all__ = [
    "ATOMIC_KINDS", "SEVERITIES", "BaselineTable", "BoundsError", "CheckpointError", "CloudFormatError",
    "ContractError", "CorruptionKind", "CorruptionParams", "CorruptionSpec", "Corruptor", "EvalReport",
    "ModelConfig", "ModelParams", "NumericalError", "PVAdaClassifier", "PVAdaError", "PointCloud", "ShapeError",
    "Tensor", "TrainConfig", "UndefinedBaselineError", "UnitSphereNormalizer", "ValidationError", "backward",
    "build_report", "corrupt", "corruption_error", "corruption_suite", "count_parameters", "forward",
    "forward_batch", "generate_dataset", "init_params", "knn", "label_smoothed_ce", "load_checkpoint", "mean_ce",
    "no_grad", "normalize_unit_sphere", "overall_accuracy", "read_cloud", "save_checkpoint", "train",
    "voxel_downsample", "write_cloud",
]
