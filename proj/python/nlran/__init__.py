"""Python access to the nlran C++ core."""

from ._core import (
    CapabilityError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    Model,
    NetworkConfig,
    count_flops,
    count_params,
    describe,
    gradcheck_suite,
    roc_auc,
    weighted_metrics,
)

__all__ = [
    "CapabilityError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "Model",
    "NetworkConfig",
    "count_flops",
    "count_params",
    "describe",
    "gradcheck_suite",
    "roc_auc",
    "weighted_metrics",
]
