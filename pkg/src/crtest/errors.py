"""Exception hierarchy shared across the package.

Exit codes (used by the CLI): 2 config error, 3 data error,
4 computation cap exceeded, 1 anything else.
"""


class CrtestError(Exception):
    exit_code = 1


class ConfigError(CrtestError):
    """Invalid or incompatible run configuration."""

    exit_code = 2


class DataError(CrtestError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class CapExceededError(CrtestError):
    """An enumeration exceeded its configured cap."""

    exit_code = 4

    def __init__(self, what: str, size, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"{what}: size {size} exceeds cap {cap}")


class EngineError(CrtestError):
    """A test engine was asked to do something it cannot do exactly."""

    exit_code = 2
