"""Monte Carlo UMPU and equal-tailed selective tests, and their interval inversions.

The tilted empirical family at θ is a discrete law on the sample points. A
randomized two-sided test with cutoffs Γ1 = (c1, γ1), Γ2 = (c2, 1 − γ2) in the
dictionary order on (z, u) is parameterized by the masses a1, a2 of its two
rejection tails. The level equation K1 = 0 fixes a2 = α − a1 (this is Γ̂2(Γ1));
the unbiasedness residual

    K2(a1) = E[Z | accept] − E[Z]

is then piecewise linear and nondecreasing in a1, so it is solved by binary
search on [0, α]. The sign of K2 at the observed point's own tail mass decides
tail membership, which drives the confidence-interval search over θ.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from app.core.config import get_settings
from app.core.exceptions import (
    BracketNotFoundError,
    DegenerateTiltError,
    InvalidConfigurationError,
    NonMonotoneIndicatorError,
)
from app.core.logger import get_module_logger
from app.core.rng import base_seed, derive_rng
from app.schemas.outcomes import Diagnostics, RandomizedCutoff, TestOutcome
from app.services.expfam import (
    NaturalFamily1D,
    TiltedSampleSet,
    check_ess,
    pool_tilted,
    tilted_mean,
    tilted_variance,
)

log = get_module_logger("umpu")

_BISECTION_STEPS = 200


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


# ==================== 离散经验分布 ====================


@dataclass(frozen=True)
class EmpiricalLaw:
    """Discrete law of the statistic under the tilted empirical family at ``theta``."""

    support: np.ndarray
    mass: np.ndarray
    below: np.ndarray
    above: np.ndarray
    moment_below: np.ndarray
    moment_above: np.ndarray
    mean: float
    theta: float

    @classmethod
    def from_samples(
        cls,
        samples: TiltedSampleSet,
        theta: float,
        grouping: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> "EmpiricalLaw":
        w = samples.normalized_weights(theta)
        if grouping is None:
            grouping = np.unique(samples.points, return_inverse=True)
        support, inverse = grouping
        mass = np.bincount(inverse, weights=w, minlength=support.size)
        keep = mass > 0
        support, mass = support[keep], mass[keep] / mass[keep].sum()
        return cls.from_masses(support, mass, theta)

    @classmethod
    def from_masses(cls, support: np.ndarray, mass: np.ndarray, theta: float) -> "EmpiricalLaw":
        """Law on sorted distinct ``support`` with normalized ``mass``."""
        cum = np.cumsum(mass)
        below = np.concatenate(([0.0], cum[:-1]))
        above = np.concatenate((np.cumsum(mass[::-1])[::-1][1:], [0.0]))
        first = mass * support
        cum_first = np.cumsum(first)
        moment_below = np.concatenate(([0.0], cum_first[:-1]))
        moment_above = np.concatenate((np.cumsum(first[::-1])[::-1][1:], [0.0]))
        return cls(
            support=support,
            mass=mass,
            below=below,
            above=above,
            moment_below=moment_below,
            moment_above=moment_above,
            mean=float(cum_first[-1]),
            theta=float(theta),
        )

    @property
    def scale(self) -> float:
        spread = float(self.support[-1] - self.support[0])
        return max(spread, abs(self.mean), 1e-300)

    def _atom(self, z: float) -> tuple[float, float, float]:
        """(P(Z < z), P(Z = z), P(Z > z))."""
        idx = int(np.searchsorted(self.support, z, side="left"))
        if idx == self.support.size:
            return 1.0, 0.0, 0.0
        if self.support[idx] == z:
            return float(self.below[idx]), float(self.mass[idx]), float(self.above[idx])
        return float(self.below[idx]), 0.0, float(self.above[idx] + self.mass[idx])

    def mass_below(self, z: float, u: float = 0.0) -> float:
        """P((Z, U) ≺ (z, u)) = P(Z < z) + u·P(Z = z)."""
        strictly_below, at, _ = self._atom(z)
        return strictly_below + u * at

    def mass_above(self, z: float, u: float = 1.0) -> float:
        """P((Z, U) ≻ (z, u)) = P(Z > z) + (1 − u)·P(Z = z)."""
        _, at, strictly_above = self._atom(z)
        return strictly_above + (1.0 - u) * at

    def _lower_index(self, a: float) -> int:
        idx = int(np.searchsorted(self.below + self.mass, a, side="left"))
        return min(idx, self.support.size - 1)

    def _upper_index(self, b: float) -> int:
        reversed_cum = (self.above + self.mass)[::-1]
        idx = int(np.searchsorted(reversed_cum, b, side="left"))
        return self.support.size - 1 - min(idx, self.support.size - 1)

    def lower_moment(self, a: float) -> float:
        """E[Z; lower rejection tail of mass a]."""
        j = self._lower_index(a)
        return float(self.moment_below[j] + (a - self.below[j]) * self.support[j])

    def upper_moment(self, b: float) -> float:
        """E[Z; upper rejection tail of mass b]."""
        j = self._upper_index(b)
        return float(self.moment_above[j] + (b - self.above[j]) * self.support[j])

    def lower_cutoff(self, a: float) -> RandomizedCutoff:
        j = self._lower_index(a)
        gamma = (a - self.below[j]) / self.mass[j]
        return RandomizedCutoff(c=float(self.support[j]), gamma=float(np.clip(gamma, 0.0, 1.0)))

    def upper_cutoff(self, b: float) -> RandomizedCutoff:
        j = self._upper_index(b)
        gamma = (b - self.above[j]) / self.mass[j]
        return RandomizedCutoff(c=float(self.support[j]), gamma=float(np.clip(gamma, 0.0, 1.0)))

    def k2(self, a1: float, alpha: float) -> float:
        """E[Z | accept] − E[Z] for lower tail mass a1 and upper tail mass α − a1."""
        rejected = self.lower_moment(a1) + self.upper_moment(alpha - a1)
        return (alpha * self.mean - rejected) / (1.0 - alpha)


@dataclass(frozen=True)
class UMPUSolution:
    lower: RandomizedCutoff
    upper: RandomizedCutoff
    lower_mass: float
    k1_residual: float
    k2_residual: float
    flags: tuple[str, ...] = ()


def _solve_lower_mass(law: EmpiricalLaw, alpha: float) -> tuple[float, tuple[str, ...]]:
    lo, hi = 0.0, alpha
    k_lo, k_hi = law.k2(lo, alpha), law.k2(hi, alpha)
    scale_tol = 1e-12 * law.scale
    if law.support.size == 1 or (abs(k_lo) <= scale_tol and abs(k_hi) <= scale_tol):
        return alpha / 2.0, ("degenerate_family",)
    if k_lo >= 0.0:
        log.warning(f"K2 has no sign change at theta={law.theta:.6g}; lower-boundary solution")
        return 0.0, ("one_sided_boundary",)
    if k_hi <= 0.0:
        log.warning(f"K2 has no sign change at theta={law.theta:.6g}; upper-boundary solution")
        return alpha, ("one_sided_boundary",)

    for _ in range(_BISECTION_STEPS):
        if hi - lo <= 4 * np.finfo(float).eps * alpha:
            break
        mid = 0.5 * (lo + hi)
        k_mid = law.k2(mid, alpha)
        if k_mid < 0.0:
            lo, k_lo = mid, k_mid
        else:
            hi, k_hi = mid, k_mid
    # K2 is linear inside the final bracket
    if k_hi != k_lo:
        return float(np.clip(lo - k_lo * (hi - lo) / (k_hi - k_lo), lo, hi)), ()
    return 0.5 * (lo + hi), ()


def _solve_on_law(law: EmpiricalLaw, alpha: float) -> UMPUSolution:
    a1, flags = _solve_lower_mass(law, alpha)
    a2 = alpha - a1
    lower, upper = law.lower_cutoff(a1), law.upper_cutoff(a2)
    rejected = law.mass_below(lower.c, lower.gamma) + law.mass_above(upper.c, 1.0 - upper.gamma)
    k1 = abs(rejected - alpha)
    k2 = abs(law.k2(a1, alpha))
    tol = get_settings().umpu.cutoff_tol
    if "one_sided_boundary" not in flags and k2 > tol * law.scale:
        log.warning(f"unbiasedness residual {k2:.3e} above tolerance at theta={law.theta:.6g}")
        flags = (*flags, "k2_residual")
    return UMPUSolution(lower, upper, a1, k1, k2, flags)


def solve_umpu_cutoffs(
    samples: TiltedSampleSet, theta0: float, alpha: float
) -> tuple[RandomizedCutoff, RandomizedCutoff]:
    """Cutoffs (Γ1, Γ2) of the randomized UMPU test at θ0."""
    _check_alpha(alpha)
    check_ess(samples, theta0)
    solution = _solve_on_law(EmpiricalLaw.from_samples(samples, theta0), alpha)
    return solution.lower, solution.upper


def umpu_decision(z_obs: float, u: float, cutoffs: tuple[RandomizedCutoff, RandomizedCutoff]) -> bool:
    """Membership of (z, u) in the rejection region {≺ Γ1} ∪ {≻ Γ2}."""
    lower, upper = cutoffs
    in_lower = z_obs < lower.c or (z_obs == lower.c and u < lower.gamma)
    in_upper = z_obs > upper.c or (z_obs == upper.c and u > 1.0 - upper.gamma)
    return in_lower or in_upper


def in_left_tail(law: EmpiricalLaw, z_obs: float, u: float, alpha: float) -> bool:
    """(z, u) lies in the left rejection tail iff K2((z, u), Γ̂2((z, u))) < 0."""
    a = law.mass_below(z_obs, u)
    return a <= alpha and law.k2(a, alpha) < 0.0


def in_right_tail(law: EmpiricalLaw, z_obs: float, u: float, alpha: float) -> bool:
    b = law.mass_above(z_obs, u)
    return b <= alpha and law.k2(alpha - b, alpha) > 0.0


# ==================== 检验 ====================


def _tail_probabilities(
    samples: TiltedSampleSet, z_obs: float, theta: float, exact: bool
) -> tuple[float, float]:
    """Guarded lower/upper tail probabilities P(Z ≤ z), P(Z ≥ z) under the tilt."""
    w = samples.normalized_weights(theta)
    lower = float(w[samples.points <= z_obs].sum())
    upper = float(w[samples.points >= z_obs].sum())
    if exact:
        return min(lower, 1.0), min(upper, 1.0)
    n = samples.n
    return (n * lower + 1.0) / (n + 1.0), (n * upper + 1.0) / (n + 1.0)


def one_sided_mc_test(
    z_obs: float,
    samples: TiltedSampleSet,
    theta0: float,
    alpha: float,
    u: float | None = None,
) -> TestOutcome:
    """Rank test of H0: θ ≤ θ0 against larger θ.

    With unit weights this rejects iff z_obs is among the ⌊(n+1)α⌋ largest of
    {z_obs, Z_1, ..., Z_n}. Passing ``u`` breaks ties at z_obs at random in the
    dictionary order, which makes the level exact for discrete statistics.
    """
    _check_alpha(alpha)
    n = samples.n
    w = samples.normalized_weights(theta0)
    diagnostics = Diagnostics(ess=check_ess(samples, theta0))
    if u is None:
        tail = float(w[samples.points >= z_obs].sum())
        p_value = (n * tail + 1.0) / (n + 1.0)
    else:
        above = float(w[samples.points > z_obs].sum())
        tied = float(w[samples.points == z_obs].sum())
        p_value = (n * above + u * (n * tied + 1.0)) / (n + 1.0)
    if (n + 1) * alpha < 1.0:
        log.warning(f"(n+1)·alpha = {(n + 1) * alpha:.3g} < 1: the rank test cannot reject")
        diagnostics.flag("cannot_reject")
    p_value = float(min(max(p_value, 0.0), 1.0))
    return TestOutcome(
        method="one_sided",
        p_value=p_value,
        reject=p_value <= alpha,
        alpha=alpha,
        aux_uniform=u,
        diagnostics=diagnostics,
    )


def equal_tailed_p_value(
    z_obs: float, samples: TiltedSampleSet, theta0: float, exact: bool = False
) -> float:
    lower, upper = _tail_probabilities(samples, z_obs, theta0, exact)
    return float(min(1.0, 2.0 * min(lower, upper)))


def equal_tailed_test(
    z_obs: float,
    samples: TiltedSampleSet,
    theta0: float,
    alpha: float,
    exact: bool = False,
) -> TestOutcome:
    """Union of the two one-sided level-α/2 tests; p = 2·min(lower, upper) capped at 1.

    ``exact`` marks ``samples`` as the exact (enumerated) law, dropping the
    +1/(n+1) Monte Carlo guard.
    """
    _check_alpha(alpha)
    diagnostics = Diagnostics(ess=check_ess(samples, theta0))
    p_value = equal_tailed_p_value(z_obs, samples, theta0, exact)
    if not exact and (samples.n + 1) * alpha / 2.0 < 1.0:
        diagnostics.flag("cannot_reject")
    return TestOutcome(
        method="equal_tailed",
        p_value=p_value,
        reject=p_value <= alpha,
        alpha=alpha,
        diagnostics=diagnostics,
    )


def umpu_test(
    z_obs: float,
    u: float,
    samples: TiltedSampleSet,
    theta0: float,
    alpha: float,
    exact: bool = False,
) -> TestOutcome:
    """Randomized UMPU decision at θ0, reported with the equal-tailed p-value."""
    _check_alpha(alpha)
    ess = check_ess(samples, theta0)
    solution = _solve_on_law(EmpiricalLaw.from_samples(samples, theta0), alpha)
    cutoffs = (solution.lower, solution.upper)
    diagnostics = Diagnostics(
        ess=ess,
        k1_residual=solution.k1_residual,
        k2_residual=solution.k2_residual,
        flags=list(solution.flags),
    )
    return TestOutcome(
        method="umpu",
        p_value=equal_tailed_p_value(z_obs, samples, theta0, exact),
        reject=umpu_decision(z_obs, u, cutoffs),
        alpha=alpha,
        aux_uniform=u,
        cutoffs=cutoffs,
        diagnostics=diagnostics,
    )


# ==================== 置信区间 ====================

TailIndicator = Callable[[float], tuple[bool, bool]]


def tail_indicator(
    z_obs: float,
    u: float,
    samples: TiltedSampleSet,
    alpha: float,
    method: str = "umpu",
    exact: bool = False,
) -> TailIndicator:
    """θ ↦ (left-tail rejection, right-tail rejection) of the observed point."""
    _check_alpha(alpha)
    if method == "umpu":
        grouping = np.unique(samples.points, return_inverse=True)

        def indicator(theta: float) -> tuple[bool, bool]:
            law = EmpiricalLaw.from_samples(samples, theta, grouping)
            return in_left_tail(law, z_obs, u, alpha), in_right_tail(law, z_obs, u, alpha)

    elif method == "equal_tailed":

        def indicator(theta: float) -> tuple[bool, bool]:
            lower, upper = _tail_probabilities(samples, z_obs, theta, exact)
            return lower <= alpha / 2.0, upper <= alpha / 2.0

    else:
        raise InvalidConfigurationError(f"unknown interval method {method!r}")
    return indicator


def _safe_indicator(indicator: TailIndicator, theta: float) -> tuple[bool, bool] | None:
    try:
        return indicator(theta)
    except DegenerateTiltError:
        return None


def _check_monotone(grid: np.ndarray, states: list[tuple[bool, bool]]) -> None:
    left = [s[0] for s in states]
    right = [s[1] for s in states]
    if any(a and not b for a, b in zip(left, left[1:], strict=False)) or any(
        b and not a for a, b in zip(right, right[1:], strict=False)
    ):
        raise NonMonotoneIndicatorError(
            f"tail indicators are not monotone over the θ grid [{grid[0]:.4g}, {grid[-1]:.4g}]; "
            "add reference points or samples per reference"
        )


def _bisect_switch(
    indicator: TailIndicator, side: int, lo: float, hi: float, tol: float
) -> float:
    """Boundary between lo (indicator[side] = not target) and hi, to tolerance ``tol``."""
    state_lo = indicator(lo)[side]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if indicator(mid)[side] == state_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def invert_tail_indicator(
    indicator: TailIndicator, grid: np.ndarray, tol: float | None = None
) -> tuple[float, float]:
    """Interval of θ where neither tail rejects, bracketed by ``grid``.

    Raises BracketNotFoundError when an endpoint lies outside the grid; an
    endpoint beyond the last grid point on the open side is reported as ±∞.
    """
    tol = get_settings().umpu.theta_tol if tol is None else tol
    grid = np.sort(np.asarray(grid, dtype=float))
    states = [indicator(theta) for theta in grid]
    _check_monotone(grid, states)
    left = [s[0] for s in states]
    right = [s[1] for s in states]

    if left[0]:
        raise BracketNotFoundError("upper confidence bound lies below the θ grid")
    if right[-1]:
        raise BracketNotFoundError("lower confidence bound lies above the θ grid")

    if any(left):
        i = left.index(True)
        upper = _bisect_switch(indicator, 0, float(grid[i - 1]), float(grid[i]), tol)
    else:
        upper = math.inf
    if any(right):
        i = len(right) - 1 - right[::-1].index(True)
        lower = _bisect_switch(indicator, 1, float(grid[i]), float(grid[i + 1]), tol)
    else:
        lower = -math.inf
    return lower, upper


class _ReferenceGrid:
    """Reference samples drawn adaptively from a family around the observed statistic."""

    def __init__(self, family: NaturalFamily1D, seed: int):
        self.family = family
        self.seed = seed
        self.sets: dict[float, TiltedSampleSet] = {}
        self._draws = 0

    def draw(self, theta: float) -> TiltedSampleSet:
        if theta not in self.sets:
            rng = derive_rng(self._draws, seed=self.seed)
            self._draws += 1
            self.sets[theta] = self.family.draw(theta, rng)
        return self.sets[theta]

    def spread(self, theta: float) -> float:
        samples = self.draw(theta)
        sd = math.sqrt(max(tilted_variance(samples, theta), 0.0))
        return sd if sd > 0 else math.nan

    def moment_match(self, z_obs: float, steps: int) -> float:
        """Newton iterations on the tilted mean toward z_obs, fresh draws each step."""
        theta = self.family.start()
        for _ in range(steps):
            samples = self.draw(theta)
            mean = tilted_mean(samples, theta)
            var = tilted_variance(samples, theta)
            if var <= 0:
                break
            sd = math.sqrt(var)
            if abs(z_obs - mean) <= 0.25 * sd:
                break
            step = float(np.clip((z_obs - mean) / var, -3.0 / sd, 3.0 / sd))
            theta = self.family.clip(theta + step)
        return theta

    def step(self, theta: float, direction: int, spacing: float) -> float | None:
        """Next reference point outward, or None at the parameter-range edge."""
        sd = self.spread(theta)
        if not math.isfinite(sd):
            return None
        candidate = theta + direction * spacing / sd
        lo, hi = self.family.parameter_range
        if not lo < candidate < hi:
            return None
        return candidate

    def pooled(self) -> TiltedSampleSet:
        return pool_tilted([self.sets[t] for t in sorted(self.sets)])

    @property
    def grid(self) -> np.ndarray:
        return np.array(sorted(self.sets))


def _family_interval(
    z_obs: float,
    u: float,
    family: NaturalFamily1D,
    alpha: float,
    method: str,
    seed: int | None,
) -> tuple[float, float]:
    _check_alpha(alpha)
    settings = get_settings().umpu
    grid = _ReferenceGrid(family, base_seed() if seed is None else seed)

    center = grid.moment_match(z_obs, settings.newton_steps)
    grid.draw(center)
    edges = {1: center, -1: center}
    for direction in (1, -1):
        for _ in range(settings.reference_points // 2):
            nxt = grid.step(edges[direction], direction, settings.reference_spacing)
            if nxt is None:
                break
            grid.draw(nxt)
            edges[direction] = nxt

    for _ in range(settings.max_grid_expansions + 1):
        pooled = grid.pooled()
        indicator = tail_indicator(z_obs, u, pooled, alpha, method)
        thetas = grid.grid
        states = [_safe_indicator(indicator, t) for t in thetas]
        usable = [s for s in states if s is not None]
        if not usable:
            break
        # extend upward while the upper bound is unbracketed or the lower bound sits above the grid
        need_up = not any(s[0] for s in usable) or usable[-1][1]
        need_down = not any(s[1] for s in usable) or usable[0][0]
        grew = False
        if need_up:
            nxt = grid.step(float(thetas[-1]), 1, settings.reference_spacing)
            if nxt is not None:
                grid.draw(nxt)
                grew = True
        if need_down:
            nxt = grid.step(float(thetas[0]), -1, settings.reference_spacing)
            if nxt is not None:
                grid.draw(nxt)
                grew = True
        if not grew:
            break

    pooled = grid.pooled()
    indicator = tail_indicator(z_obs, u, pooled, alpha, method)
    lower, upper = invert_tail_indicator(indicator, grid.grid, settings.theta_tol)
    lo_range, hi_range = family.parameter_range
    lower = max(lower, lo_range)
    upper = min(upper, hi_range)
    log.debug(
        f"{method} interval [{lower:.6g}, {upper:.6g}] from {len(grid.sets)} reference draws"
    )
    return lower, upper


def umpu_confidence_interval(
    z_obs: float,
    u: float,
    family: NaturalFamily1D,
    alpha: float,
    seed: int | None = None,
) -> tuple[float, float]:
    """θ0 values whose randomized UMPU test does not reject (z_obs, u)."""
    return _family_interval(z_obs, u, family, alpha, "umpu", seed)


def equal_tailed_confidence_interval(
    z_obs: float,
    family: NaturalFamily1D,
    alpha: float,
    seed: int | None = None,
) -> tuple[float, float]:
    """θ0 values whose equal-tailed test does not reject z_obs."""
    return _family_interval(z_obs, 0.5, family, alpha, "equal_tailed", seed)


def _solve_theta(f: Callable[[float], float], label: str, limit: float) -> float:
    """Root of a monotone function of θ, bracketed by doubling from [−1, 1]."""
    lo, hi = -1.0, 1.0
    while hi <= limit:
        if np.sign(f(lo)) != np.sign(f(hi)):
            return float(brentq(f, lo, hi, xtol=1e-10, maxiter=200))
        lo, hi = 2.0 * lo, 2.0 * hi
    raise BracketNotFoundError(f"{label}: no root for |θ| ≤ {limit:g}")


def enumerated_confidence_interval(
    z_obs: float,
    samples: TiltedSampleSet,
    alpha: float,
    limit: float = 1e3,
) -> tuple[float, float]:
    """Equal-tailed θ interval when ``samples`` is the exact law (an enumeration or quadrature grid).

    An observation at the edge of the support leaves that side unbounded.
    """
    _check_alpha(alpha)
    half = alpha / 2.0
    if z_obs <= samples.points.min():
        lower = -math.inf
    else:
        lower = _solve_theta(
            lambda t: _tail_probabilities(samples, z_obs, t, exact=True)[1] - half, "lower bound", limit
        )
    if z_obs >= samples.points.max():
        upper = math.inf
    else:
        upper = _solve_theta(
            lambda t: _tail_probabilities(samples, z_obs, t, exact=True)[0] - half, "upper bound", limit
        )
    return lower, upper
