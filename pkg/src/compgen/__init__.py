"""Transformer lab for algorithmic compositional-generalization studies."""

from compgen.data import DatasetSpec, Example, Vocabulary
from compgen.model import ModelConfig, Transformer, parameter_count, preset

__all__ = [
    "DatasetSpec",
    "Example",
    "ModelConfig",
    "Transformer",
    "Vocabulary",
    "parameter_count",
    "preset",
]

__version__ = "0.1.0"
