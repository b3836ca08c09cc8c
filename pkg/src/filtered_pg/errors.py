"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (dimensions, tables, parameters)."""


class UsageError(RuntimeError):
    """An operation was called in a setting where it is undefined."""


class EnumerationError(ValueError):
    """Exact enumeration requested over a space that is too large."""

    def __init__(self, cardinality: int, limit: int):
        super().__init__(
            f"enumeration space has {cardinality} paths, above the limit of {limit}"
        )
        self.cardinality = cardinality
        self.limit = limit
