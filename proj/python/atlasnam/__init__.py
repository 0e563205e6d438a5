"""Uncertainty-aware neural additive atlas models."""

from ._core import *  # noqa: F401,F403
from ._core import (  # noqa: F401
    ConfigError,
    DataError,
    DomainError,
    Error,
    NumericalError,
)

__version__ = "0.1.0"
