"""Exception types shared across the toolkit.

ConfigError maps to CLI exit code 1, everything else to exit code 2.
"""


class PetlabError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PetlabError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(PetlabError, ValueError):
    """Invalid model, method, task or experiment configuration."""


class BudgetError(ConfigError):
    """A trainable-parameter budget cannot be hosted as requested."""


class InputError(PetlabError, ValueError):
    """Invalid runtime input (token ids, labels, batches)."""


class UsageError(PetlabError, RuntimeError):
    """An API was called in an unsupported way."""


class NumericError(PetlabError, RuntimeError):
    """A numeric invariant was violated (non-finite loss, unstable check)."""


class TaskGenerationError(PetlabError, RuntimeError):
    """A synthetic task could not satisfy its construction constraints."""
