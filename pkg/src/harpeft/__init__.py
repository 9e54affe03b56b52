"""harpeft: masked-autoencoder sensor transformers with full, LoRA and QLoRA
fine-tuning under a leave-one-dataset-out protocol.

The estimator API in :mod:`harpeft.estimators` is the high-level entry point;
the submodules expose the underlying pieces (numerics tape, model, adapters,
quantization, data pipeline, evaluation harnesses, CLI).
"""

from .estimators import ActivityClassifier, WindowEncoder
from .finetune import Strategy, TrainConfig
from .model import ModelConfig
from .numerics import Matrix, Parameter, Rng
from .peft import LoraConfig

__version__ = "0.1.0"

__all__ = [
    "ActivityClassifier",
    "WindowEncoder",
    "Strategy",
    "TrainConfig",
    "ModelConfig",
    "LoraConfig",
    "Matrix",
    "Parameter",
    "Rng",
    "__version__",
]
