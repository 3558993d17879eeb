"""Exception types shared across the toolkit."""


class TomoflowError(Exception):
    """Base class for all toolkit-specific errors."""


class InvalidGeometryError(TomoflowError, ValueError):
    """Acquisition parameters describe a scan that cannot exist or cannot be used."""


class ShapeMismatchError(TomoflowError, ValueError):
    """Array data disagrees with the metadata that is supposed to describe it."""


class DataFormatError(TomoflowError, ValueError):
    """A file failed magic, header, or payload validation."""


class ConfigError(TomoflowError, ValueError):
    """A run configuration failed validation.

    Carries the offending field name so command-line messages can point at it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class DivergenceError(TomoflowError, RuntimeError):
    """An ODE solve produced non-finite values.

    Parameters
    ----------
    step_index : int
        Zero-based index of the integration step that failed.
    max_abs : float
        Largest finite magnitude seen in the state when the solve aborted.
    """

    def __init__(self, step_index: int, max_abs: float, message: str | None = None):
        self.step_index = step_index
        self.max_abs = max_abs
        if message is None:
            message = (
                f"non-finite value during ODE step {step_index} "
                f"(max |state| = {max_abs:.6g})"
            )
        super().__init__(message)
