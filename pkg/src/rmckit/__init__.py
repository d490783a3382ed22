"""Robustness-aware model compression toolkit.

A small float64 autodiff engine, a transformer sentence-pair classifier,
a synthetic shortcut-bearing task, magnitude and attention-head pruning,
difficulty-aware distillation, and an evaluation harness for relative
robustness metrics.
"""

from .tensor import Tensor, AdamW, backward, no_grad
from .errors import (
    ConfigError,
    ContractError,
    DependencyError,
    GenerationError,
    MetricUndefinedError,
    NumericError,
    ParseError,
    ShapeError,
)

__version__ = "0.1.0"
