"""Exception types shared across the package."""


class MicroVlaError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MicroVlaError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(MicroVlaError):
    """A configuration value is invalid or inconsistent."""


class StateError(MicroVlaError):
    """Runtime state (cache, codec, checkpoint) does not match expectations."""


class DecodeError(MicroVlaError):
    """An emitted or supplied token cannot be decoded."""


class BenchError(MicroVlaError):
    """A benchmark contract was violated (too few repeats, coarse timer)."""
