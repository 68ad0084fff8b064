"""Exception hierarchy shared across the package."""


class AnoconError(Exception):
    pass


class StorageError(AnoconError, OSError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


class ParseError(AnoconError, ValueError):
    def __init__(self, field, msg):
        super().__init__(f"{field}: {msg}")
        self.field = field


class DomainError(AnoconError, ValueError):
    pass


class ShapeError(AnoconError, ValueError):
    def __init__(self, expected, actual, what="input"):
        super().__init__(f"{what} shape mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class UsageError(AnoconError, ValueError):
    pass


class ConfigError(UsageError):
    pass


class MetricUndefinedError(AnoconError, ValueError):
    pass
