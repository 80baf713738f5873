"""Maximum-likelihood mixed models for correlated multivariate count data."""

from .families import CmpSeriesControl, Family, SeriesError
from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["CmpSeriesControl", "Family", "SeriesError", "backend_name", "__version__"]
