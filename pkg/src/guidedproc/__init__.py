"""Neurally-guided accumulative procedural models.

2D turtle-style generative programs whose random choices can be steered by
small per-choice-site neural networks. Unguided SMC generates training data;
maximum-likelihood training fits the networks; the trained guide then serves
as an importance distribution for much cheaper SMC.
"""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    CorruptExampleError,
    DegenerateConstraintError,
    DegeneratePopulationError,
    ParameterDomainError,
    StructuralMismatchError,
    TraceExhaustedError,
)

__all__ = [
    "ContractError",
    "CorruptExampleError",
    "DegenerateConstraintError",
    "DegeneratePopulationError",
    "ParameterDomainError",
    "StructuralMismatchError",
    "TraceExhaustedError",
]
