"""Desk-scale parameter-efficient tuning toolkit."""

from .autodiff import Tensor, MaskedWeight, backward, grad_check
from .errors import (
    BudgetError,
    ConfigError,
    InputError,
    NumericError,
    PetlabError,
    ShapeError,
    TaskGenerationError,
    UsageError,
)

__version__ = "0.1.0"
