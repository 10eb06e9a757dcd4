"""
Exception hierarchy for cuspbranch.

Numerical failures derive from NumericalFailure and map to exit code 3 in the
CLI; configuration problems raise ConfigInvalid and map to exit code 2.
"""

from typing import List, Optional, Sequence

__all__ = [
    "CuspBranchError",
    "NumericalFailure",
    "OutOfModuli",
    "DegenerateAlpha",
    "NotMonotone",
    "MonotonicityFailure",
    "GridMismatch",
    "ModeOutOfRange",
    "BetaNotOnGrid",
    "StepTooSmall",
    "SolverNoConvergence",
    "BracketFailure",
    "TurningPointInWindow",
    "WindowEmpty",
    "SingularAtilde",
    "GreenNormalizationSmall",
    "BranchLost",
    "NotNearCrossing",
    "AmbiguousTracking",
    "NoSignChange",
    "ConfigInvalid",
]


class CuspBranchError(Exception):
    """Base class of all errors raised by the library."""


class NumericalFailure(CuspBranchError):
    """A computation could not deliver a certified result."""


class OutOfModuli(CuspBranchError):
    """The (c, w) pair lies outside the closed moduli space."""


class DegenerateAlpha(NumericalFailure):
    """alpha >= alpha_bar: the cubic normalisation constant vanishes."""


class NotMonotone(NumericalFailure):
    """The cubic is not strictly increasing on the inversion bracket."""


class MonotonicityFailure(NumericalFailure):
    """The normalising map is not a diffeomorphism at the reported point."""

    def __init__(self, message: str, x: float, y: float):
        super().__init__(f"{message} at (x={x:.6g}, y={y:.6g})")
        self.x = x
        self.y = y


class GridMismatch(CuspBranchError):
    """Two mode functions live on different grids or mode cutoffs."""


class ModeOutOfRange(CuspBranchError):
    """Requested Fourier mode is outside 0..K_max."""


class BetaNotOnGrid(CuspBranchError):
    """The truncation height is not a node of the y-grid."""


class StepTooSmall(NumericalFailure):
    """Finite-difference step does not fit below the parameter value."""


class SolverNoConvergence(NumericalFailure):
    """Generalized eigensolver failed to certify its eigenpairs."""

    def __init__(
        self,
        message: str,
        iterations: int = 0,
        residuals: Optional[Sequence[float]] = None,
    ):
        super().__init__(message)
        self.iterations = iterations
        self.residuals: List[float] = list(residuals or [])


class BracketFailure(NumericalFailure):
    """A root bracket does not contain a sign change."""


class TurningPointInWindow(NumericalFailure):
    """The WKB frequency function changes sign on the requested interval."""


class WindowEmpty(CuspBranchError):
    """No model eigenvalue lies in the requested spectral window."""


class SingularAtilde(NumericalFailure):
    """The shifted model form could not be factorized."""


class GreenNormalizationSmall(NumericalFailure):
    """The integral of the normalised zero-mode solution is too small."""


class BranchLost(NumericalFailure):
    """Continuation lost the branch at the minimal step."""

    def __init__(self, message: str, t: float, overlap: float):
        super().__init__(f"{message} (t={t:.6g}, overlap={overlap:.3f})")
        self.t = t
        self.overlap = overlap


class NotNearCrossing(CuspBranchError):
    """The zero-mode eigenvalue is outside the crossing window."""


class AmbiguousTracking(NumericalFailure):
    """More than one model eigenvalue qualifies as the tracking eigenvalue."""


class NoSignChange(NumericalFailure):
    """The crossing equation has no sign change on the sampled branch."""


class ConfigInvalid(CuspBranchError):
    """Run configuration failed validation."""

    def __init__(self, field_errors: Sequence[str]):
        self.field_errors = list(field_errors)
        super().__init__("Invalid configuration: " + "; ".join(self.field_errors))
