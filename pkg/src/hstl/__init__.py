"""Hierarchical spatio-temporal representation learning for silhouette gait recognition."""

from hstl.errors import ConfigError, DataError, HstlError, NumericError, ShapeError
from hstl.hierarchy import PartitionHierarchy, PartitionLevel, default_hierarchy

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "HstlError",
    "NumericError",
    "ShapeError",
    "PartitionHierarchy",
    "PartitionLevel",
    "default_hierarchy",
    "__version__",
]
