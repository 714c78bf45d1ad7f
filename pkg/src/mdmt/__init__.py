"""Semi-supervised multi-domain multi-task learning for 3-D scan classification."""
from .datagen import DomainDataset, DomainSpec, generate_domain, normalize, split_patientwise
from .estimator import MultiDomainMultiTaskClassifier, VolumeStandardizer
from .exceptions import (ConfigError, DimensionError, DomainError, EvaluationError, FormatError,
                         GenerationError, MDMTError, NumericError, UsageError)
from .metrics import dice_score, roc_auc, roc_curve
from .network import ArchConfig, ModelParams, init_params
from .tensor import Tensor, no_grad
from .trainer import Strategy, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "DimensionError", "DomainDataset", "DomainError", "DomainSpec",
    "EvaluationError", "FormatError", "GenerationError", "MDMTError", "ModelParams",
    "MultiDomainMultiTaskClassifier", "NumericError", "Strategy", "Tensor", "TrainConfig",
    "UsageError", "VolumeStandardizer", "dice_score", "evaluate", "generate_domain",
    "init_params", "no_grad", "normalize", "roc_auc", "roc_curve", "split_patientwise", "train",
]
