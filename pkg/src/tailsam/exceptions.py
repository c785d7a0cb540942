"""Exception types raised across the package."""


class TailsamError(Exception):
    """Base class for all package-specific errors."""


class ParseError(TailsamError, ValueError):
    """A text record could not be parsed. Carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(TailsamError, ValueError):
    pass


class DatasetTooSmallError(TailsamError, ValueError):
    pass


class InvalidConfigError(TailsamError, ValueError):
    pass


class IdOutOfRangeError(TailsamError, IndexError):
    pass


class DimensionMismatchError(TailsamError, ValueError):
    pass


class NonFiniteWeightError(TailsamError, ValueError):
    pass


class NonFiniteGradientError(TailsamError, ArithmeticError):
    """A training step produced a non-finite gradient. Carries the step index."""

    def __init__(self, step_index, message="non-finite gradient"):
        super().__init__(f"{message} at step {step_index}")
        self.step_index = step_index


class ZeroFrequencyTargetError(TailsamError, ValueError):
    pass


class ZeroGradientError(TailsamError, ArithmeticError):
    """Perturbation direction is degenerate: positive radius but ~zero gradient."""


class DomainError(TailsamError, ValueError):
    pass


class EmptyScopeError(TailsamError, ValueError):
    pass
