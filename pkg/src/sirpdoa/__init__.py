"""Iterative ML / MAP direction-of-arrival estimation under SIRP noise."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BracketError,
    ConfigurationError,
    DegenerateResidualError,
    DomainError,
    NumericalError,
    SingularityError,
    SirpDoaError,
)
from .estimators import (  # noqa: E402
    CovarianceUpdate,
    EstimateReport,
    EstimatorState,
    StopCriterion,
    cmle,
    imape,
    imle,
)
from .noise_model import TextureKind, TextureParams  # noqa: E402
from .numerics import GridSpec  # noqa: E402
from .signal_model import ArrayGeometry  # noqa: E402

__all__ = [
    "ArrayGeometry",
    "BracketError",
    "ConfigurationError",
    "CovarianceUpdate",
    "DegenerateResidualError",
    "DomainError",
    "EstimateReport",
    "EstimatorState",
    "GridSpec",
    "NumericalError",
    "SingularityError",
    "SirpDoaError",
    "StopCriterion",
    "TextureKind",
    "TextureParams",
    "cmle",
    "imape",
    "imle",
]
