"""Exception hierarchy shared across the package."""


class DelayIdError(Exception):
    """Base class for all package errors."""


class ConfigError(DelayIdError, ValueError):
    pass


class TermSyntaxError(ConfigError):
    """A catalog term string could not be parsed.

    ``position`` is the 0-based column where parsing stopped.
    """

    def __init__(self, text, position, reason):
        self.text = text
        self.position = position
        self.reason = reason
        marker = " " * position + "^"
        super().__init__(f"{reason} at column {position}:\n  {text}\n  {marker}")


class NumericalError(DelayIdError):
    pass


class SingularOperand(NumericalError):
    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"operand of {term} too close to zero ({value!r})")


class Diverged(NumericalError):
    def __init__(self, time, bound):
        self.time = time
        self.bound = bound
        super().__init__(f"state exceeded {bound:g} at t={time:g}")


class TooShort(DelayIdError, ValueError):
    pass


class CutoffOutOfRange(DelayIdError, ValueError):
    pass


class DelayTooLarge(DelayIdError, ValueError):
    pass


class WindowTooSmall(ConfigError):
    pass


class WindowTouchesZero(ConfigError):
    pass


class CholeskyFailure(NumericalError):
    pass


class CorrelationGateError(DelayIdError):
    """Highly correlated candidate columns were left unresolved."""

    def __init__(self, pairs):
        self.pairs = pairs
        lines = [f"  {a} ~ {b}: r = {r:+.6f}" for a, b, r in pairs]
        super().__init__(
            "correlated candidate functions must be resolved before discovery "
            "(set discover.correlation.drop or discover.correlation.auto_drop):\n"
            + "\n".join(lines)
        )


class AllDrawsDiverged(NumericalError):
    pass


class SamplerError(NumericalError):
    """Wraps a failure inside the chain with the iteration where it happened."""

    def __init__(self, iteration, cause):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"iteration {iteration}: {cause}")


class EmptyModel(UserWarning):
    """No candidate cleared the inclusion threshold; the model has no terms."""
