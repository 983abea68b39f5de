"""Saturated-model selective z-inference.

Given P⊥_η Y, the statistic ηᵀY is N(ηᵀμ, σ²‖η‖²) truncated to the
truncation set of the observed point, so tests and intervals are exact and
need no sampling. The hypothesized value pins ηᵀμ.
"""

import numpy as np

from app.core.exceptions import InvalidConfigurationError, SaturatedTTestError
from app.schemas.outcomes import Diagnostics, TestOutcome
from app.services.regions import IntervalUnion, SelectionRegion, truncation_set
from app.services.regression import RegressionProblem, eta_vector
from app.services.truncated import TruncatedGaussian, truncated_gaussian_interval


def _law(problem: RegressionProblem, region: SelectionRegion) -> tuple[float, TruncatedGaussian]:
    if problem.sigma is None:
        raise InvalidConfigurationError("saturated z-inference needs a known sigma")
    eta = eta_vector(problem.X, problem.model, problem.target)
    support = truncation_set(problem.y, eta, region)
    scale = problem.sigma * float(np.linalg.norm(eta))
    return float(eta @ problem.y), TruncatedGaussian(problem.null_value, scale, support)


def saturated_z_interval(
    problem: RegressionProblem,
    region: SelectionRegion,
    alpha: float,
    method: str = "equal_tailed",
) -> tuple[float, float]:
    """Interval for ηᵀμ; ``method`` is ``equal_tailed`` or ``umau``."""
    z, law = _law(problem, region)
    return truncated_gaussian_interval(z, law.sigma, law.support, alpha, method)


def saturated_z_test(
    problem: RegressionProblem,
    region: SelectionRegion,
    alpha: float,
    with_interval: bool = True,
) -> TestOutcome:
    """Pivot test of ηᵀμ = null_value: p = 2·min(W, 1 − W).

    With ``problem.method == "umpu"`` the decision comes from the UMPU cutoffs
    of the truncated law; the reported p-value stays equal-tailed.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    z, law = _law(problem, region)
    p_value = min(1.0, 2.0 * min(law.cdf(z), law.sf(z)))
    cutoffs = None
    if problem.method == "umpu":
        c1, c2 = law.umpu_cutoffs(alpha)
        reject = z < c1 or z > c2
        cutoffs = (c1, c2)
    else:
        reject = p_value <= alpha

    diagnostics = Diagnostics(
        extra={
            "statistic": z,
            "pivot": law.cdf(z),
            "truncation": law.support.to_list(),
            "null_value": problem.null_value,
        }
    )
    if cutoffs is not None:
        diagnostics.extra["umpu_cutoffs"] = list(cutoffs)
    lo = hi = None
    if with_interval:
        interval_method = "umau" if problem.method == "umpu" else "equal_tailed"
        lo, hi = truncated_gaussian_interval(z, law.sigma, law.support, alpha, interval_method)
    return TestOutcome(
        method=f"saturated_{problem.method}",
        p_value=float(p_value),
        reject=bool(reject),
        alpha=alpha,
        ci_lo=lo,
        ci_hi=hi,
        diagnostics=diagnostics,
    )


def saturated_t_test(problem: RegressionProblem, region: SelectionRegion, alpha: float) -> TestOutcome:
    """Always raises: conditioning on P⊥_η Y and ‖Y‖ fixes |ηᵀY|."""
    raise SaturatedTTestError(
        "the saturated-model t-test is vacuous: given P⊥_η Y and ‖Y‖ only the sign of ηᵀY "
        "remains random, leaving insufficient information; use selected_t_test "
        f"(alpha={alpha}, target={problem.target}, {region.dim}-dim region)"
    )


def classical_z_p_value(z: float, mean: float, scale: float) -> float:
    """Two-sided p-value of an untruncated z statistic."""
    law = TruncatedGaussian(mean, scale, IntervalUnion.real_line())
    return min(1.0, 2.0 * min(law.cdf(z), law.sf(z)))

