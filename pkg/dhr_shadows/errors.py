"""
Error types shared across the dhr_shadows package.
"""


class DhrError(Exception):
    """Base class for every error raised deliberately by dhr_shadows."""


class ConfigError(DhrError):
    """Invalid configuration. Messages start with the dotted key path."""


class SceneError(DhrError, ValueError):
    """Unknown scene, degenerate geometry or malformed triangle soup."""


class DecodeError(DhrError):
    """A frame payload or datagram could not be decoded."""


class DimensionMismatchError(DhrError, ValueError):
    """Buffers that must share a resolution do not."""


class SuiteError(DhrError):
    """Unknown experiment suite."""
