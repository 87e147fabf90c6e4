"""Self-intersection local times of planar Gaussian fields under flows with interaction."""

__version__ = "0.1.0"

from .errors import BudgetError, InputError, NumericalError, SiltError
from .field import CovarianceSpec, FieldSample, GridSpec, sample_field, sample_product_field
from .localtime import SiltConfig, silt_estimate

__all__ = [
    "BudgetError",
    "CovarianceSpec",
    "FieldSample",
    "GridSpec",
    "InputError",
    "NumericalError",
    "SiltConfig",
    "SiltError",
    "sample_field",
    "sample_product_field",
    "silt_estimate",
]
