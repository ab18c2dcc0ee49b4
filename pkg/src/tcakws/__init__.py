"""Keyword-spotting toolkit: temporal-conv/attention model, contrastive
siamese pretraining, teacher-embedding distillation, and a training CLI."""

from .errors import ContractViolation, StoreIntegrityError, StoreNotFound
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "StoreIntegrityError",
    "StoreNotFound",
    "Tape",
    "Tensor",
    "backward",
    "__version__",
]
