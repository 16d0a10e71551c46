"""Exception types shared across the package."""


class MoaxError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MoaxError, ValueError):
    """Operands have incompatible or malformed dimensions."""


class ConfigError(MoaxError, ValueError):
    """Invalid configuration value, schedule, plan, or config file."""


class ContractError(MoaxError, RuntimeError):
    """A caller violated an API precondition (e.g. non-scalar loss)."""


class CheckpointError(MoaxError, RuntimeError):
    """Checkpoint is missing, truncated, or fails integrity checks."""
