"""Exception and warning types shared across the package."""


class KmaError(Exception):
    """Base class for all errors raised by :mod:`kma`."""


class ConfigError(KmaError, ValueError):
    """Invalid or inconsistent configuration.

    Parameters
    ----------
    field : str
        Dotted name of the offending configuration field.
    message : str
        Human readable explanation.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DivergedError(KmaError, ArithmeticError):
    """A simulation, rollout or training run produced non-finite values."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class NotStabilizableError(KmaError, ArithmeticError):
    """The Riccati iteration failed or the resulting closed loop is unstable."""


class RankDeficientWarning(UserWarning):
    """A least-squares design matrix was rank deficient.

    The minimum-norm solution is still returned.
    """
