"""Exceptions raised by intersection_forecast."""


class ForecastError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGeometry(ForecastError):
    """A lane segment, lane graph or agent state violates its invariants."""


class DegenerateGeometry(InvalidGeometry):
    """Offsetting a centerline produced a self-intersecting lane polygon."""


class NotOnRoad(ForecastError):
    """No lane polygon contains the queried position."""


class UnknownSegment(ForecastError, KeyError):
    """A segment id is not present in the lane graph."""


class ShapeMismatch(ForecastError, ValueError):
    """Array or tensor shapes do not match the expected contract."""


class InsufficientHistory(ForecastError):
    """A track does not hold enough states for the requested history."""


class SchemaVersionMismatch(ForecastError):
    """A serialized artifact was written with an unsupported schema_version."""


class DivergenceDetected(ForecastError):
    """Training loss or gradients became non-finite or exploded."""


class IndexOutOfRange(ForecastError, IndexError):
    """A prediction step index lies outside 1..n."""


class MissingCheckpoint(ForecastError):
    """No checkpoint exists for the requested model."""


class UnknownSample(ForecastError, KeyError):
    """A sample key is not present in the archive."""


class ConfigError(ForecastError):
    """The run configuration is invalid."""
