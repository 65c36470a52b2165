"""Shared exception types.

Kept deliberately small: shape and configuration problems are ValueError
flavors so callers that only care about "bad input" can catch one base
class, while evaluation-time failures (NaN loss, rejected updates) are
RuntimeError flavors.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value violates a documented precondition."""


class EvaluationError(RuntimeError):
    """A numeric evaluation produced a non-finite or otherwise unusable value."""


class UpdateRejected(RuntimeError):
    """A parameter update was refused (non-finite delta or shape mismatch)."""
