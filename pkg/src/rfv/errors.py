"""Exception hierarchy shared across the package."""


class RfvError(Exception):
    """Base class for all errors raised by rfv."""


class UserError(RfvError):
    """Errors caused by bad input; the CLI maps these to exit code 2."""


class InvariantViolation(UserError):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        msg = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(msg)


class DuplicateId(UserError):
    pass


class AreaMismatch(UserError):
    pass


class FormatVersionMismatch(UserError):
    pass


class CorruptManifest(UserError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoContactFound(UserError):
    pass


class InsufficientPoints(UserError):
    pass


class TooFewPoints(UserError):
    pass


class NonMonotonicTime(UserError):
    pass


class EmptyBitmap(UserError):
    pass


class EmptyText(UserError):
    pass


class DimMismatch(UserError):
    pass


class EmptyIndex(UserError):
    pass


class RTooLarge(UserError):
    pass


class ShapeMismatch(UserError):
    pass


class EmptyDataset(UserError):
    pass


class ExpertFailure(RfvError):
    pass


class ConfigError(UserError):
    pass
