"""Exception hierarchy shared by all modules."""


class CompressionError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(CompressionError, ValueError):
    pass


class DegenerateInputError(CompressionError, ValueError):
    pass


class EvaluationError(CompressionError, ArithmeticError):
    """A function evaluated to a non-finite value at a given coordinate."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class FormatError(CompressionError, ValueError):
    """A file did not parse. ``field`` names the offending header field."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Header dimensions disagree with each other or with the payload length."""


class TrainingDivergenceError(CompressionError, FloatingPointError):
    """Loss or gradient went non-finite during training."""

    def __init__(self, message: str, step: int | None = None, group: str | None = None,
                 last_good=None):
        super().__init__(message)
        self.step = step
        self.group = group
        self.last_good = last_good
