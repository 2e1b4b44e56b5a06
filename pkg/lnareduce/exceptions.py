"""Error taxonomy for lnareduce.

Two families: validation problems (bad model or bad input, ValueError) and
numerical failures (RuntimeError). The CLI maps them to exit codes 1 and 2.
"""


class LnaReduceError(Exception):
    """Root of every error raised by this package."""


# Validation family ----------------------------------------------------------

class ModelValidationError(LnaReduceError, ValueError):
    """The model or the request is malformed."""


class SchemaError(ModelValidationError):
    def __init__(self, field, message, line=None):
        self.field = field
        self.line = line
        where = f"{field}" if line is None else f"{field} (line {line})"
        super().__init__(f"{where}: {message}")


class StructuralError(ModelValidationError):
    def __init__(self, reaction, message):
        self.reaction = reaction
        super().__init__(f"reaction '{reaction}': {message}")


class TransformError(ModelValidationError):
    def __init__(self, message, condition_number=None):
        self.condition_number = condition_number
        super().__init__(message)


class GridMismatchError(ModelValidationError):
    pass


# Numerical family -----------------------------------------------------------

class NumericalError(LnaReduceError, RuntimeError):
    """A computation could not be carried out on a valid model."""


class DomainError(NumericalError):
    def __init__(self, reaction, value, state, t):
        self.reaction = reaction
        self.value = value
        self.state = state
        self.t = t
        super().__init__(
            f"propensity of '{reaction}' is {value:.3e} < 0 at y={list(state)}, t={t}"
        )


class NoConvergenceError(NumericalError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class WrongBranchError(NumericalError):
    pass


class SingularityError(NumericalError):
    def __init__(self, message, condition_number):
        self.condition_number = condition_number
        super().__init__(f"{message} (condition number {condition_number:.3e})")


class StiffnessError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step, t, realization=None):
        self.step = step
        self.t = t
        self.realization = realization
        who = "" if realization is None else f"realization {realization}, "
        super().__init__(f"non-finite state at {who}step {step}, t={t}")
