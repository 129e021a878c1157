"""Exception types shared across the package.

Each class carries a short machine-parsable ``code`` so the CLI can emit
one-line errors of the form ``E_DOMAIN: <message>``.
"""


class FuseFieldError(Exception):
    """Base class for all package errors."""

    code = "E_INTERNAL"


class DomainError(FuseFieldError):
    """An argument violates an operation's precondition."""

    code = "E_DOMAIN"


class OutOfBoundsError(DomainError):
    """A query point lies outside the interpolable region of a grid."""

    code = "E_BOUNDS"


class FormatError(FuseFieldError):
    """A file does not match its documented binary/text layout."""

    code = "E_FORMAT"


class ConfigError(FuseFieldError):
    """A configuration file or override is invalid."""

    code = "E_CONFIG"
