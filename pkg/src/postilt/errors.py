"""Exception hierarchy. Each class maps to a CLI exit code."""


class PostIltError(Exception):
    exit_code = 1


class ConfigError(PostIltError):
    exit_code = 2


class DataError(PostIltError):
    exit_code = 3


class LayoutParseError(DataError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class BoundsError(DataError):
    pass


class ShapeError(DataError):
    pass


class NumericError(PostIltError):
    exit_code = 4


class UsageError(PostIltError):
    pass
