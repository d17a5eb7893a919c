from ._cteach import (
    ConfigError,
    DataError,
    DimensionError,
    IoError,
    Scene,
    World,
    evaluate,
    gradient_suite,
    harmonic_iou,
    main,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "IoError",
    "Scene",
    "World",
    "evaluate",
    "gradient_suite",
    "harmonic_iou",
    "main",
    "train",
]
