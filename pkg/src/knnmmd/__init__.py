"""Cross-domain few-shot classification with KNN pseudo-labels and local MK-MMD alignment."""

from knnmmd.errors import ConfigError, DataError, DivergenceError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DivergenceError", "__version__"]
