"""Exception hierarchy shared by all stages."""


class SgfusionError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SgfusionError, ValueError):
    """A parameter or configuration value is invalid."""


class DomainError(SgfusionError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class SchemaError(SgfusionError, ValueError):
    """Inputs that must agree in shape, bins or keys do not."""


class LabelRangeError(DomainError):
    """A label falls outside the histogram bin range."""

    def __init__(self, label: float, lo: float, hi: float):
        super().__init__(f"label {label!r} outside histogram range [{lo!r}, {hi!r}]")
        self.label = label


class NumericError(SgfusionError, ArithmeticError):
    """A non-finite value reached a computation that requires finite input."""


class DependencyError(SgfusionError, RuntimeError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""
