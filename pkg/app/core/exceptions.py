"""Error hierarchy.

Every failure raised by the library is a ``SelektorError``. The two families
map onto command-line exit codes: precondition violations exit with 2,
numerical failures with 3.
"""


class SelektorError(Exception):
    """Base error."""

    exit_code: int = 1


class PreconditionError(SelektorError, ValueError):
    """输入不满足前置条件。"""

    exit_code = 2


class NumericalError(SelektorError, ArithmeticError):
    """数值计算失败。"""

    exit_code = 3


# ==================== 前置条件错误 ====================


class InvalidConfigurationError(PreconditionError):
    """Bad argument combination or out-of-range parameter."""


class NotInRegionError(PreconditionError):
    """Observed point lies outside the selection region."""


class DegenerateDirectionError(PreconditionError):
    """Zero-length test direction."""


class RankDeficiencyError(PreconditionError):
    """Design columns are (numerically) collinear."""

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class InsufficientResidualDimensionError(PreconditionError):
    """Too few residual degrees of freedom for the t-test."""


class SaturatedTTestError(PreconditionError):
    """The saturated-model t-test conditions away all information."""


# ==================== 数值错误 ====================


class DegenerateTiltError(NumericalError):
    """All tilted weights vanished."""


class FarTailError(NumericalError):
    """Truncation support carries no representable Gaussian mass."""


class BracketNotFoundError(NumericalError):
    """Root bracket could not be established."""


class NonMonotoneIndicatorError(NumericalError):
    """Tail indicator switched more than once across the θ grid."""


class InfeasibleStartError(NumericalError):
    """No point inside region ∩ slice was found."""


class RejectionSamplingError(NumericalError):
    """Pilot acceptance rate too small for rejection sampling."""


class LassoConvergenceError(NumericalError):
    """Coordinate descent ran out of iterations."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class LowAcceptanceError(NumericalError):
    """Conditional Monte Carlo sampler accepted too few draws."""
