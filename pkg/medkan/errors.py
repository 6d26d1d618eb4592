"""Exception hierarchy shared by the library and the CLI exit-code mapping."""
from __future__ import annotations


class MedKANError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 4
    kind = "runtime"


class ConfigError(MedKANError, ValueError):
    """Invalid configuration values or combinations."""

    exit_code = 2
    kind = "config"


class GeometryError(ConfigError):
    """Spatial or channel geometry that a layer cannot process."""

    kind = "geometry"


class ShapeError(MedKANError, ValueError):
    """Operands whose shapes or dtypes do not fit an operation."""

    kind = "shape"


class AutogradError(MedKANError, RuntimeError):
    """Misuse of the gradient tape."""

    kind = "autograd"


class DataError(MedKANError, ValueError):
    """Missing or structurally inconsistent dataset input."""

    exit_code = 3
    kind = "data"


class NpyFormatError(DataError):
    kind = "npy"


class CheckpointError(DataError):
    kind = "checkpoint"


class UndefinedMetricError(DataError):
    """A metric has no defined value for the given labels."""

    kind = "metric"


class GradientCheckError(MedKANError):
    """Analytic and numeric gradients disagree."""

    exit_code = 1
    kind = "gradcheck"


__all__ = [
    "MedKANError",
    "ConfigError",
    "GeometryError",
    "ShapeError",
    "AutogradError",
    "DataError",
    "NpyFormatError",
    "CheckpointError",
    "UndefinedMetricError",
    "GradientCheckError",
]
