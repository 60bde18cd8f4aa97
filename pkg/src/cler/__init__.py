"""Online class-incremental learning with an equivariant pretext regularizer."""

__version__ = "0.1.0"

from .buffer import ReplayBuffer
from .errors import ConfigError, DataError, NoReplayAvailable
from .evaluation import AccuracyMatrix, final_average_accuracy, final_average_adjusted_forgetting, significance
from .methods import MethodConfig, train_sequence
from .model import ArchitectureConfig, SplitNetwork, build_network
from .pretext import TransformFamily, get_family
from .stream import ClassIncrementalStream, build_class_il_stream, make_synthetic_dataset

__all__ = [
    "AccuracyMatrix", "ArchitectureConfig", "ClassIncrementalStream", "ConfigError", "DataError",
    "MethodConfig", "NoReplayAvailable", "ReplayBuffer", "SplitNetwork", "TransformFamily",
    "build_class_il_stream", "build_network", "final_average_accuracy", "final_average_adjusted_forgetting",
    "get_family", "make_synthetic_dataset", "significance", "train_sequence",
]
