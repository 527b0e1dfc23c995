"""Exception hierarchy shared across the package.

The CLI maps each class to an exit code: ``PanelError`` -> 2,
``UnsupportedPatternError`` -> 3, ``NumericalError`` -> 4.
"""


class MNARError(Exception):
    """Base class for all package errors."""


class PanelError(MNARError, ValueError):
    """Malformed input data or a panel that violates its invariants."""


class UnsupportedPatternError(MNARError, ValueError):
    """The missing pattern is not one the completion routines can handle."""


class NumericalError(MNARError, ArithmeticError):
    """A numeric failure that invalidates downstream results."""


class RankCollapseError(NumericalError):
    """The penalized fit has fewer than ``r`` nonzero singular values."""


class SingularGramError(NumericalError):
    """An ``r x r`` Gram matrix is too ill-conditioned to invert."""
