"""Robust unsupervised driver-attention tooling.

Uncertainty-weighted pseudo-label fusion, traffic-knowledge embedding,
RoboMixup augmentation, corruption generation and robustness benchmarking
for spatial attention maps.
"""

from roboattn.errors import (
    DegenerateMap,
    DegenerateReference,
    DegenerateUncertainty,
    InvalidInput,
    IoError,
    KernelTooLarge,
    MissingAttention,
    OptimizerDiverged,
    RoboAttnError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateMap",
    "DegenerateReference",
    "DegenerateUncertainty",
    "InvalidInput",
    "IoError",
    "KernelTooLarge",
    "MissingAttention",
    "OptimizerDiverged",
    "RoboAttnError",
    "ShapeError",
]
