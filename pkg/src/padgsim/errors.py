class SimError(Exception):
    """Base class for simulator errors."""


class CapacityError(SimError):
    """A scheduler admitted work that does not fit in an instance's KV cache."""


class StaleStatus(SimError):
    """An instance status snapshot is older than the staleness bound."""


class NoFeasibleRate(SimError):
    """Goodput search found no rate meeting the attainment target."""


class EmptyInput(SimError):
    pass


class ParseError(SimError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


class SchemaError(SimError):
    def __init__(self, path, line: int, field: str, msg: str):
        super().__init__(f"{path}:{line}: field {field!r}: {msg}")
        self.path, self.line, self.field = path, line, field


class VersionMismatch(SimError):
    pass


class ConfigError(SimError):
    """Invalid scenario configuration; ``path`` names the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path
