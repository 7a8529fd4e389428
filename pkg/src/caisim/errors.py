"""Exception types shared across the simulator."""


class CaisimError(Exception):
    """Base class for all simulator errors."""


class CausalityError(CaisimError):
    """An event was scheduled before the current simulated clock."""


class LivelockError(CaisimError):
    """The event loop exceeded its processed-event cap."""


class ConfigError(CaisimError):
    """A scenario or profile field is missing or invalid.

    Carries the dotted path of the offending field so the CLI can point
    at it directly.
    """

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class FrequencyError(CaisimError):
    """Frequency outside the device table, or changed mid-service."""


class MmCannotFitError(CaisimError):
    """An object cannot be inserted because pinned bytes block eviction."""


class TraceParseError(CaisimError):
    """An arrival trace file is malformed."""

    def __init__(self, path: str, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")
