"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or dataset construction arguments."""


class ContractViolation(ValueError):
    """Mismatched shapes/state between calls that must correspond."""


class RenderError(RuntimeError):
    """Non-finite or otherwise unusable input reached the rasterizer."""


class NumericError(RuntimeError):
    """NaN/Inf appeared where finite values are required."""


class SceneFileError(RuntimeError):
    """Scene file cannot be read (bad magic, version, or truncation)."""
