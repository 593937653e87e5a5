"""plantscan: power-plant tile classification for georeferenced imagery.

A from-scratch numpy toolkit: a small CNN, a compact Vision Transformer,
and a hybrid of the two that can take a GIS-derived spatial mask as an
extra input channel, plus the training loop, metrics, geodata handling,
and command line needed to run the whole pipeline.
"""

from .models import (
    ModelSpec,
    Model,
    build_cnn,
    build_vit,
    build_hybrid,
    build_model,
    load_model,
    save_model,
    summarize,
)
from .training import TrainConfig, EpochRecord, train, evaluate

__version__ = "0.1.0"

__all__ = [
    "ModelSpec",
    "Model",
    "build_cnn",
    "build_vit",
    "build_hybrid",
    "build_model",
    "load_model",
    "save_model",
    "summarize",
    "TrainConfig",
    "EpochRecord",
    "train",
    "evaluate",
    "__version__",
]
