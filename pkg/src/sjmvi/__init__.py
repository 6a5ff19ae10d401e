"""Symmetric joint-matching variational inference for implicit latent variable models.

Submodules:
    tensor        reverse-mode autodiff over float64 arrays
    distributions prescribed conditionals, sample banks, banana prior
    divergences   f-divergence calculus and ratio-estimation bounds
    models        networks, ratio estimators and the model bundle
    objectives    every training loss as a pure function
    trainer       alternating optimization, checkpoints, metric logs
    experiments   specs, data preparation, evaluation and emission
    cli           command line entry point
"""

from .errors import (
    CheckpointError,
    ContractError,
    DomainError,
    EmptyBankError,
    GradCheckError,
    IdxFormatError,
    NonFiniteError,
    ShapeError,
    SjmviError,
    SpecError,
    TrainingAborted,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ContractError",
    "DomainError",
    "EmptyBankError",
    "GradCheckError",
    "IdxFormatError",
    "NonFiniteError",
    "ShapeError",
    "SjmviError",
    "SpecError",
    "TrainingAborted",
]
