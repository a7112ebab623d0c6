"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid environment, buffer, or training configuration."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class UsageError(RuntimeError):
    """An operation was invoked in a state where it is not allowed."""


class NumericalError(ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


class TrainingError(RuntimeError):
    """Training diverged; ``step`` holds the gradient step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VerificationError(AssertionError):
    """A numerical identity check exceeded its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
