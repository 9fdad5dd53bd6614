"""Exception hierarchy shared across the package."""


class AnclafError(Exception):
    """Base class for all package errors."""


class ShapeError(AnclafError):
    """Tensor shapes do not satisfy an operation's contract."""


class DegenerateSeriesError(AnclafError):
    """A statistic is undefined for the given series (e.g. zero variance)."""


class ConfigError(AnclafError):
    """Invalid configuration value or unparseable config file."""


class DataError(AnclafError):
    """Dataset files or arguments are invalid."""


class CheckpointError(AnclafError):
    """Checkpoint file is missing, corrupted, or has an unknown version."""


class DivergenceError(AnclafError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"training diverged in stage '{stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
