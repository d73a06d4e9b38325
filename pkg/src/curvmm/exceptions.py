"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration/usage problems
exit 2, I/O and file-format problems exit 3, numeric/domain problems exit 4.
"""


class CurvMMError(Exception):
    """Base class for all package errors."""


class ShapeError(CurvMMError):
    """Operands have incompatible or unexpected shapes."""


class InvalidInputError(CurvMMError):
    """Input contains non-finite entries or is otherwise malformed."""


class EvaluationError(CurvMMError):
    """Expression graph evaluation failed (unbound variable, zero norm, ...)."""


class DomainError(CurvMMError):
    """A point violates the admissible-set constraints.

    ``constraint`` names the violated constraint (``"x_norm"``, ``"lx_floor"``,
    ``"y_energy"``, ``"phi_norm"``).
    """

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class ConfigError(CurvMMError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(CurvMMError):
    """A serialized artifact is malformed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class NumericError(CurvMMError):
    """A numeric routine produced non-finite values or diverged."""


class CurvatureUnavailableError(NumericError):
    """No valid curvature interval exists at the requested point."""
