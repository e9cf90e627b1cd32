"""Desk-scale MatchFormer bindings.

Images are 2-D float arrays in [0, 1]; matches are [M, 5] arrays of
x1, y1, x2, y2, confidence in pixel coordinates.
"""

from ._core import (
    ConfigError,
    DegenerateError,
    IoError,
    Model,
    ModelConfig,
    NumericalError,
    ShapeError,
    config_from_text,
    corner_error,
    flops,
    make_config,
    make_pair,
    match,
    mma,
    pyramid_shapes,
    ransac,
    train,
)

__all__ = [
    "ConfigError",
    "DegenerateError",
    "IoError",
    "Model",
    "ModelConfig",
    "NumericalError",
    "ShapeError",
    "config_from_text",
    "corner_error",
    "flops",
    "make_config",
    "make_pair",
    "match",
    "mma",
    "pyramid_shapes",
    "ransac",
    "train",
]
