"""Discrete selective examples: a clinical trial with a truncated Fisher test,
and a Poisson scan statistic with a conditional Monte Carlo test.

Clinical trial: arm j is selected when its event rate is among the k lowest
treatment rates. Given the other arms and Y_0 + Y_j, selection is the cap
Y_j ≤ ⌊n_j·r⌋, with r the kth smallest rate among the other treatment arms.
Rates are compared as exact fractions. Larger β_j means a better treatment;
the natural parameter of Y_j in the conditional law is −β_j.

Scan: the window maximizes a pluggable statistic over pairs of observed
points. The default is the plain Poisson likelihood-ratio scan conditional on
the number of points N.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import xlogy

from app.core.config import get_settings
from app.core.exceptions import (
    InvalidConfigurationError,
    LowAcceptanceError,
    NotInRegionError,
)
from app.core.logger import get_module_logger
from app.core.rng import base_seed, derive_rng
from app.schemas.outcomes import Diagnostics, TestOutcome
from app.services.expfam import TiltedSampleSet
from app.services.umpu import enumerated_confidence_interval, one_sided_mc_test, umpu_test

log = get_module_logger("discrete")


# ==================== 临床试验 ====================


@dataclass(frozen=True)
class TrialData:
    """Event counts and arm sizes; arm 0 is placebo."""

    counts: tuple[int, ...]
    sizes: tuple[int, ...]
    k: int

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.counts)
        sizes = tuple(int(s) for s in self.sizes)
        if len(counts) != len(sizes) or len(counts) < 3:
            raise InvalidConfigurationError("need matching counts and sizes for placebo plus at least two arms")
        if any(s <= 0 for s in sizes):
            raise InvalidConfigurationError(f"arm sizes must be positive, got {sizes}")
        if any(not 0 <= c <= s for c, s in zip(counts, sizes, strict=True)):
            raise InvalidConfigurationError("every count must lie in [0, arm size]")
        if not 1 <= self.k < self.m:
            raise InvalidConfigurationError(f"k must satisfy 1 ≤ k < m = {self.m}, got {self.k}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sizes", sizes)

    @property
    def m(self) -> int:
        return len(self.counts) - 1

    def rate(self, j: int) -> Fraction:
        return Fraction(self.counts[j], self.sizes[j])


def clinical_select(data: TrialData) -> tuple[int, ...]:
    """Treatment arms with rate ≤ the kth smallest treatment rate; ties included."""
    rates = sorted(data.rate(j) for j in range(1, data.m + 1))
    kth = rates[data.k - 1]
    return tuple(j for j in range(1, data.m + 1) if data.rate(j) <= kth)


def selection_cap(data: TrialData, arm: int) -> int:
    """Largest Y_arm keeping the arm selected, other treatment arms held fixed."""
    if not 1 <= arm <= data.m:
        raise InvalidConfigurationError(f"arm {arm} is not a treatment arm")
    others = sorted(data.rate(j) for j in range(1, data.m + 1) if j != arm)
    threshold = others[data.k - 1]
    return math.floor(data.sizes[arm] * threshold)


def _log_comb(n: int, r: int) -> float:
    return math.log(math.comb(n, r))


def fisher_support(data: TrialData, arm: int) -> tuple[np.ndarray, np.ndarray]:
    """Admissible Y_arm values given Y_0 + Y_arm and selection, with log C(n_0, s−y)C(n_j, y)."""
    n0, nj = data.sizes[0], data.sizes[arm]
    total = data.counts[0] + data.counts[arm]
    lo = max(0, total - n0)
    hi = min(nj, total, selection_cap(data, arm))
    values = np.arange(lo, hi + 1)
    log_weights = np.array([_log_comb(n0, total - y) + _log_comb(nj, y) for y in values])
    return values.astype(float), log_weights


def fisher_interval(samples: TiltedSampleSet, y_obs: float, alpha: float) -> tuple[float, float]:
    """Equal-tailed interval for β from the truncated noncentral hypergeometric law."""
    theta_lo, theta_hi = enumerated_confidence_interval(y_obs, samples, alpha)
    # β = −θ
    return -theta_hi, -theta_lo


def selective_fisher_test(
    data: TrialData,
    arm: int,
    beta0: float = 0.0,
    alpha: float = 0.05,
    u: float | None = None,
    seed: int | None = None,
) -> TestOutcome:
    """Selective Fisher exact test of β_arm = β0 with an exact randomized UMPU decision."""
    if arm not in clinical_select(data):
        raise NotInRegionError(f"arm {arm} was not selected")
    seed = base_seed() if seed is None else seed
    if u is None:
        u = float(derive_rng(arm, seed=seed).random())
    values, log_weights = fisher_support(data, arm)
    samples = TiltedSampleSet(values, log_weights, reference_theta=0.0)
    y_obs = float(data.counts[arm])
    theta0 = -beta0

    if values.size == 1:
        log.info(f"arm {arm}: conditional support is the single point {y_obs:g}")
        return TestOutcome(
            method="umpu",
            p_value=1.0,
            reject=False,
            alpha=alpha,
            aux_uniform=u,
            ci_lo=-math.inf,
            ci_hi=math.inf,
            diagnostics=Diagnostics(seed=seed, flags=["degenerate_support"]),
        )

    outcome = umpu_test(y_obs, u, samples, theta0, alpha, exact=True)
    w = samples.normalized_weights(theta0)
    lo, hi = fisher_interval(samples, y_obs, alpha)
    diagnostics = outcome.diagnostics.model_copy(deep=True)
    diagnostics.seed = seed
    diagnostics.extra.update(
        support=[int(v) for v in values],
        cap=selection_cap(data, arm),
        p_lower=float(w[values <= y_obs].sum()),
        p_upper=float(w[values >= y_obs].sum()),
    )
    return outcome.model_copy(update={"ci_lo": lo, "ci_hi": hi, "diagnostics": diagnostics})


# ==================== 扫描统计量 ====================


@dataclass(frozen=True)
class ScanData:
    points: np.ndarray
    window: tuple[float, float]

    def __post_init__(self) -> None:
        points = np.sort(np.asarray(self.points, dtype=float).ravel())
        a, b = self.window
        if points.size < 2 or points[0] < 0.0 or points[-1] > 1.0:
            raise InvalidConfigurationError("scan data needs at least two points in [0, 1]")
        if not (0.0 <= a < b <= 1.0) or a not in points or b not in points:
            raise InvalidConfigurationError(f"window {self.window} must be a pair of observed points")
        object.__setattr__(self, "points", points)

    @property
    def count(self) -> int:
        a, b = self.window
        return int(np.sum((self.points >= a) & (self.points <= b)))


ScanStatistic = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def poisson_lr_statistic(inside: np.ndarray, length: np.ndarray, total: int) -> np.ndarray:
    """Binomial log-likelihood ratio of an elevated window, zero when not elevated."""
    inside = np.asarray(inside, dtype=float)
    length = np.asarray(length, dtype=float)
    outside = total - inside
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = (
            xlogy(inside, inside / (total * length))
            + xlogy(outside, outside / (total * (1.0 - length)))
        )
    elevated = inside > total * length
    stat = np.where(elevated & np.isfinite(stat), stat, 0.0)
    return np.where(length > 0, stat, -np.inf)


def _scan_indices(points: np.ndarray, statistic: ScanStatistic) -> tuple[np.ndarray, np.ndarray]:
    """Argmax pair (i, j), i < j, for each row of a (B, N) array of sorted points.

    Ties go to the smaller i, then the larger j.
    """
    batch, total = points.shape
    i_idx, j_idx = np.triu_indices(total, k=1)
    inside = (j_idx - i_idx + 1).astype(float)
    length = points[:, j_idx] - points[:, i_idx]
    stat = statistic(np.broadcast_to(inside, length.shape), length, total)
    # pairs are ordered by i ascending, j ascending; flip j within each i for the tie rule
    order = np.lexsort((-j_idx, i_idx))
    best = np.argmax(stat[:, order], axis=1)
    chosen = order[best]
    return i_idx[chosen], j_idx[chosen]


def scan_select(points: np.ndarray, statistic: ScanStatistic | None = None) -> tuple[float, float]:
    """Window [Y_i, Y_j] maximizing the scan statistic over all point pairs."""
    pts = np.sort(np.asarray(points, dtype=float).ravel())
    if pts.size < 2:
        raise InvalidConfigurationError("scan selection needs at least two points")
    i, j = _scan_indices(pts[None, :], statistic or poisson_lr_statistic)
    return float(pts[i[0]]), float(pts[j[0]])


def scan_test(
    points: np.ndarray,
    window: tuple[float, float],
    alpha: float,
    n_mc: int | None = None,
    seed: int | None = None,
    statistic: ScanStatistic | None = None,
) -> TestOutcome:
    """Monte Carlo test of β = 0 from L(T | N, window selected).

    Simulated sets contain a, b and N − 2 uniforms; those selecting a
    different window are rejected. Ties at the observed count are broken with
    an auxiliary uniform in the dictionary order.
    """
    statistic = statistic or poisson_lr_statistic
    data = ScanData(points, window)
    a, b = data.window
    if scan_select(data.points, statistic) != (a, b):
        raise NotInRegionError(f"window {window} is not the selected window of these points")
    settings = get_settings().scan
    n_mc = settings.n_mc if n_mc is None else n_mc
    seed = base_seed() if seed is None else seed
    rng = np.random.default_rng(seed)
    u = float(rng.random())
    total = data.points.size
    t_obs = data.count

    if t_obs == total:
        log.info("window covers every point; the conditional count is deterministic")
        return TestOutcome(
            method="one_sided",
            p_value=1.0,
            reject=False,
            alpha=alpha,
            aux_uniform=u,
            diagnostics=Diagnostics(seed=seed, flags=["degenerate_window"]),
        )

    fill = rng.random((n_mc, total - 2))
    sims = np.sort(np.hstack([np.full((n_mc, 1), a), np.full((n_mc, 1), b), fill]), axis=1)
    i, j = _scan_indices(sims, statistic)
    rows = np.arange(n_mc)
    keep = (sims[rows, i] == a) & (sims[rows, j] == b)
    accepted = int(keep.sum())
    acceptance = accepted / n_mc
    if accepted == 0 or acceptance < settings.min_acceptance:
        raise LowAcceptanceError(
            f"conditional scan sampler accepted {accepted} of {n_mc} draws; "
            "increase n_mc or use a coarser selection variable"
        )
    counts = (j[keep] - i[keep] + 1).astype(float)
    outcome = one_sided_mc_test(float(t_obs), TiltedSampleSet.from_weights(counts), 0.0, alpha, u=u)
    diagnostics = outcome.diagnostics.model_copy(deep=True)
    diagnostics.seed = seed
    diagnostics.extra.update(accepted=accepted, acceptance=acceptance, count=t_obs)
    return outcome.model_copy(update={"diagnostics": diagnostics})
