"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class NumericsError(RuntimeError):
    """A numeric failure (NaN/Inf loss) that aborts a run."""


class DataFormatError(RuntimeError):
    """A dataset file is unreadable: bad magic, version, or truncation."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable: bad magic, version, or checksum."""


class CompatibilityError(RuntimeError):
    """A checkpoint and the requested world/config do not match."""
