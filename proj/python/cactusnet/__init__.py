from ._cactusnet import (
    AggregationError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    RangeError,
    ShapeError,
    Thresholds,
    class_applicability,
    compute_thresholds,
    predict,
    predict_applicability,
    read_table,
    route_step,
    run,
    verdict,
)

__all__ = [
    "AggregationError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "RangeError",
    "ShapeError",
    "Thresholds",
    "class_applicability",
    "compute_thresholds",
    "predict",
    "predict_applicability",
    "read_table",
    "route_step",
    "run",
    "verdict",
]
