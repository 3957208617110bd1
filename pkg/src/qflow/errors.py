"""Exception types shared across the package.

Input-contract violations subclass ValueError so callers can catch them
generically; numerical failures subclass RuntimeError.
"""


class QflowError(Exception):
    """Base class for all package-specific errors."""


class InputError(QflowError, ValueError):
    """Invalid argument or file content (CLI exit code 2)."""


class InvalidOrderError(InputError):
    """Truncation order is odd, negative, or unsupported."""


class DomainError(InputError):
    """Point outside the admissible domain (non-unit direction, |q| >= tau)."""


class RankDeficiencyError(InputError):
    """Unregularized normal matrix is singular."""


class InvalidRotationError(InputError):
    """Matrix is not a proper rotation."""


class FormatError(InputError):
    """Malformed volume, scheme, or config file."""


class NumericalError(QflowError, RuntimeError):
    """Numerical failure during optimization or transform (CLI exit code 3)."""


class FoldingError(NumericalError):
    """Deformation has a non-positive Jacobian determinant."""


class DegenerateJacobianError(NumericalError):
    """Jacobian too singular for the finite-strain differential."""


class DivergenceError(NumericalError):
    """Flow integration produced NaN or overflow."""


class InversionQualityError(NumericalError):
    """Fixed-point inversion failed to converge on too many voxels."""


class DegeneratePdfError(NumericalError):
    """Displacement PDF is identically zero and cannot be normalized."""
