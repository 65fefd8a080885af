"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` so the CLI can map failures to process
exit statuses without string matching.
"""


class ArtifactError(Exception):
    exit_code = 1


class ParameterError(ArtifactError, ValueError):
    """Invalid model, prior or configuration parameter."""

    exit_code = 2


class ConfigError(ParameterError):
    """Malformed experiment configuration or CLI override."""


class DomainError(ArtifactError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ChannelError(ArtifactError):
    """Poisson intensity would overflow."""

    def __init__(self, i, j, exponent):
        self.i, self.j, self.exponent = i, j, exponent
        super().__init__(f"exponent {exponent:.6g} at entry ({i}, {j}) exceeds the overflow guard")


class EmptyDataError(ArtifactError):
    pass


class DegenerateTermError(ArtifactError):
    """Some rows or columns of the count matrix sum to zero."""

    def __init__(self, rows, cols):
        self.rows, self.cols = list(rows), list(cols)
        super().__init__(f"zero-count rows {self.rows[:20]} and columns {self.cols[:20]}")


class ConditioningError(ArtifactError):
    pass


class ConvergenceError(ArtifactError):
    def __init__(self, message, residual=float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class DivergenceError(ArtifactError):
    """Non-finite values or blow-up during an iteration."""

    exit_code = 3

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class StepSizeError(DivergenceError):
    pass


class UndefinedMetricError(ArtifactError):
    pass


class ParseError(ArtifactError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
