"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class StylePlanError(Exception):
    exit_code = 1


class ConfigurationError(StylePlanError, ValueError):
    exit_code = 2


class InputError(StylePlanError, ValueError):
    exit_code = 2


class ResourceError(StylePlanError):
    exit_code = 2


class NumericalError(StylePlanError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, step=None, index=None):
        if step is not None:
            message = f"{message} (diffusion step {step})"
        if index is not None:
            message = f"{message} (point index {index})"
        super().__init__(message)
        self.step = step
        self.index = index
