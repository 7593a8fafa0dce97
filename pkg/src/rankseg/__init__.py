"""Rank-guided hint refinement for segmentation under distribution shift.

The package is organised bottom-up:

``ndarr``       tensors with reverse-mode autodiff, conv layers, Adam
``segnet``      hint-conditioned encoder/decoder and its checkpoint format
``rankcore``    perturbation, log-odds grading and hint distillation
``losses``      Dice and squeeze losses
``evolve``      multi-phase self-evolution and recursive inference
``synthshift``  synthetic scenes, parametric shifts, dataset files
``metrics``     Dice, HD95 and evaluation reports
``cli``         the ``rankseg`` command
"""

from rankseg.errors import (
    ConfigError,
    CorruptionError,
    DegenerateInstance,
    DimensionError,
    GenerationError,
    IncompatibleVersionError,
    NumericAbort,
    RanksegError,
    ValidationError,
)
from rankseg.hints import HintPair, null_hints

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptionError",
    "DegenerateInstance",
    "DimensionError",
    "GenerationError",
    "HintPair",
    "IncompatibleVersionError",
    "NumericAbort",
    "RanksegError",
    "ValidationError",
    "null_hints",
]
