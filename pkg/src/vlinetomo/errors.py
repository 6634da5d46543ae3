"""Exception types shared across the package."""


class VLineError(Exception):
    """Base class for all package-specific errors."""


class DegenerateGeometry(VLineError):
    """Branch directions are (numerically) linearly dependent at some point."""


class SupportViolation(VLineError):
    """A phantom's support does not fit inside the configured support disc."""


class GeometryMismatch(VLineError):
    """Two data sets that must share grid/geometry do not."""


class DegenerateMap(VLineError):
    """Tilde coordinate change undefined (alpha = 0 or u1*u2 = 0)."""


class NoConvergence(VLineError):
    """Linear solver failed to reach the requested residual."""


class StalledCharacteristic(VLineError):
    """Transport drift vanished along a characteristic."""


class NoExit(VLineError):
    """A characteristic or data ray failed to leave its domain within the length cap."""


class ConfigError(VLineError):
    """CLI configuration could not be parsed or is inconsistent."""
