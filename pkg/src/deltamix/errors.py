"""Exception hierarchy shared by the library and the CLI."""


class DeltamixError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DeltamixError, ValueError):
    """Invalid configuration or inconsistent inputs."""


class DomainError(DeltamixError, ValueError):
    """Argument outside the domain of a mathematical function."""


class NumericalError(DeltamixError, ArithmeticError):
    """A numerical routine produced non-finite output."""


class InputError(DeltamixError, ValueError):
    """Malformed user input (count files, serialized estimates)."""
