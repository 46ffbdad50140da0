"""Physics-constrained k-space trajectory learning with a neural ODE and an adjoint solver."""

from .errors import (BandError, ConfigError, ExportError, IntegrationError, KtrajError, ParseError,
                     ShapeError, TrainingDivergence, UndefinedTestError)

__version__ = "0.1.0"

__all__ = [
    "KtrajError", "ShapeError", "BandError", "IntegrationError", "ExportError", "ParseError",
    "UndefinedTestError", "TrainingDivergence", "ConfigError", "__version__",
]
