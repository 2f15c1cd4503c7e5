"""Exception types shared across the package."""


class AoeptError(Exception):
    pass


class ShapeError(AoeptError, ValueError):
    """Operand extents are incompatible."""


class DomainError(AoeptError, ValueError):
    """Argument outside the mathematical domain of an operation (e.g. log of 0)."""


class ContractError(AoeptError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class NumericError(AoeptError, ArithmeticError):
    """Non-finite values appeared from finite inputs (overflow, NaN loss)."""


class InputError(AoeptError, ValueError):
    """Invalid user-supplied value (ids, rates, sizes)."""


class ConfigError(AoeptError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingArtifactError(AoeptError, FileNotFoundError):
    """An upstream pipeline stage has not been run."""

    def __init__(self, path, command: str):
        self.command = command
        super().__init__(f"missing {path}; run `aoept {command}` first")
