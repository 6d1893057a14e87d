"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, loss_name: str, value: float | None = None):
        self.loss_name = loss_name
        self.value = value
        super().__init__(f"non-finite {loss_name} loss (value={value!r})")


class FormatError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class LabelAccessError(PermissionError):
    """Training code asked an unlabeled client for its targets."""
