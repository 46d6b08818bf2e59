from .toolkit import AdvCLToolkit, load_config
from .exceptions import (AdvCLToolkitError, ConfigurationError, ValidationError, ArtifactIOError, StateError,
                         AttackError, ClusteringError, TrainingError)
from .models import (BNRoute, ViewRecipe, FinetuneMode, AttackInit, PerturbBudget, ExperimentConfig,
                     PretrainConfig, FinetuneConfig, EvalConfig, EvalReport, RunManifest)
from .network import RobustModel, load_checkpoint, save_checkpoint
from .clusterfit import PseudoLabelTable, kmeans
from .frequency_views import fft_decompose

__version__ = "0.1.0"

__all__ = [
    "AdvCLToolkit",
    "load_config",
    "AdvCLToolkitError",
    "ConfigurationError",
    "ValidationError",
    "ArtifactIOError",
    "StateError",
    "AttackError",
    "ClusteringError",
    "TrainingError",
    "BNRoute",
    "ViewRecipe",
    "FinetuneMode",
    "AttackInit",
    "PerturbBudget",
    "ExperimentConfig",
    "PretrainConfig",
    "FinetuneConfig",
    "EvalConfig",
    "EvalReport",
    "RunManifest",
    "RobustModel",
    "load_checkpoint",
    "save_checkpoint",
    "PseudoLabelTable",
    "kmeans",
    "fft_decompose",
]
