"""Nested U-Net segmentation and DSNT needle-tip localization for ICSI frames,
built on a small numpy reverse-mode autodiff engine."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateTestError,
    IcsinetError,
    InputError,
    NumericalError,
    ShapeError,
)
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateTestError",
    "IcsinetError",
    "InputError",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
]
