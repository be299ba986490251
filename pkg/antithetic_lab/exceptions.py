"""
Exceptions shared by the sampling, analysis and experiments apps.

Bad inputs raise django.core.exceptions.ValidationError with field-level
messages. The classes here cover what can go wrong once inputs are valid.
"""

from django.core.exceptions import ValidationError


class NumericalFailure(ArithmeticError):
    """A computation on valid inputs produced no usable number."""


class SamplerDivergence(NumericalFailure):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"Non-finite state produced at step {step}.")


class UndefinedStatistic(NumericalFailure):
    """The statistic is undefined for the given data (constant input, zero mass)."""


class UnsupportedDimension(ValidationError):
    """Requested dimension is outside what the underlying tables support."""

    def __init__(self, dim, limit):
        self.dim = dim
        self.limit = limit
        super().__init__({"d": f"Dimension {dim} exceeds the supported maximum of {limit}."})
