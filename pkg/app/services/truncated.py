"""Gaussian laws truncated to a union of intervals.

Interval masses are evaluated in log space. Beyond the Mills switch point the
upper tail uses the scaled complementary error function,
Φ̄(x) = ½·erfcx(x/√2)·exp(−x²/2), so ratios of far-tail masses never cancel.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfcx, log_ndtr, logsumexp, ndtr, ndtri, ndtri_exp

from app.core.config import get_settings
from app.core.exceptions import BracketNotFoundError, FarTailError, InvalidConfigurationError, PreconditionError
from app.core.logger import get_module_logger
from app.services.expfam import NaturalFamily1D, TiltedSampleSet
from app.services.regions import IntervalUnion

log = get_module_logger("saturated")

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


# ==================== 标准正态尾部 ====================


def log_gaussian_sf(x: np.ndarray | float) -> np.ndarray | float:
    """log Φ̄(x), switching to the erfcx form above the configured threshold."""
    switch = get_settings().saturated.mills_switch
    x_arr = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        direct = log_ndtr(-x_arr)
        scaled = np.log(0.5 * erfcx(x_arr / _SQRT2)) - 0.5 * x_arr**2
    out = np.where(x_arr > switch, scaled, direct)
    out = np.where(np.isposinf(x_arr), -np.inf, out)
    return float(out) if out.ndim == 0 else out


def log_gaussian_cdf(x: np.ndarray | float) -> np.ndarray | float:
    return log_gaussian_sf(-np.asarray(x, dtype=float))


def log_gaussian_pdf(x: np.ndarray | float) -> np.ndarray | float:
    return -0.5 * np.asarray(x, dtype=float) ** 2 - _LOG_SQRT_2PI


def _log1mexp(x: float) -> float:
    """log(1 − eˣ) for x ≤ 0."""
    if x == -math.inf:
        return 0.0
    if x >= 0.0:
        return -math.inf
    if x > -math.log(2.0):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def log_interval_mass(a: float, b: float) -> float:
    """log P(a < X < b) for X ~ N(0, 1)."""
    if not a < b:
        return -math.inf
    if a >= 0.0:
        la, lb = float(log_gaussian_sf(a)), float(log_gaussian_sf(b))
        return la + _log1mexp(lb - la)
    if b <= 0.0:
        la, lb = float(log_gaussian_cdf(a)), float(log_gaussian_cdf(b))
        return lb + _log1mexp(la - lb)
    return math.log1p(-(float(ndtr(a)) + float(ndtr(-b))))


def mills_ratio(x: np.ndarray | float) -> np.ndarray | float:
    """Φ̄(x)/φ(x) via the scaled complementary error function."""
    return math.sqrt(math.pi / 2.0) * erfcx(np.asarray(x, dtype=float) / _SQRT2)


# ==================== 截断高斯分布 ====================


def _standardize(support: IntervalUnion, mu: float, sigma: float) -> list[tuple[float, float]]:
    return [((lo - mu) / sigma, (hi - mu) / sigma) for lo, hi in support.intervals]


def _log_masses(pieces: list[tuple[float, float]]) -> np.ndarray:
    return np.array([log_interval_mass(a, b) for a, b in pieces])


def _check_law(mu: float, sigma: float, support: IntervalUnion) -> None:
    if not sigma > 0:
        raise InvalidConfigurationError(f"sigma must be positive, got {sigma}")
    if support.is_empty:
        raise PreconditionError("truncation support is empty")
    if not math.isfinite(mu):
        raise InvalidConfigurationError(f"mu must be finite, got {mu}")


def _log_total(log_masses: np.ndarray) -> float:
    total = float(logsumexp(log_masses))
    if not math.isfinite(total):
        raise FarTailError("support mass underflows; evaluate the pivot in log space closer to the data")
    return total


def _inverse_piece(a: float, b: float, frac: np.ndarray) -> np.ndarray:
    """x in [a, b] with P(a < X < x) = frac·P(a < X < b), X ~ N(0, 1)."""
    frac = np.asarray(frac, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        if a >= 0.0:
            la, lb = float(log_gaussian_sf(a)), float(log_gaussian_sf(b))
            target = la + np.log1p(-frac * -math.expm1(lb - la))
            x = -ndtri_exp(target)
        elif b <= 0.0:
            la, lb = float(log_gaussian_cdf(a)), float(log_gaussian_cdf(b))
            target = lb + np.log1p(-(1.0 - frac) * -math.expm1(la - lb))
            x = ndtri_exp(target)
        else:
            pa, pb = float(ndtr(a)), float(ndtr(b))
            x = ndtri(pa + frac * (pb - pa))
    return np.clip(x, a, b)


def trunc_gauss_cdf(z: float, mu: float, sigma: float, support: IntervalUnion) -> float:
    """P(Z ≤ z | Z ∈ support) for Z ~ N(mu, sigma²)."""
    return TruncatedGaussian(mu, sigma, support).cdf(z)


@dataclass(frozen=True)
class TruncatedGaussian:
    """N(mu, sigma²) conditioned on a union of intervals."""

    mu: float
    sigma: float
    support: IntervalUnion

    def __post_init__(self) -> None:
        _check_law(self.mu, self.sigma, self.support)

    @property
    def _pieces(self) -> list[tuple[float, float]]:
        return _standardize(self.support, self.mu, self.sigma)

    def _log_split(self, z: float) -> tuple[float, float, float]:
        """(log mass below z, log mass above z, log total), unnormalized."""
        pieces = self._pieces
        log_masses = _log_masses(pieces)
        log_total = _log_total(log_masses)
        zs = (z - self.mu) / self.sigma
        below, above = [], []
        for (a, b), lm in zip(pieces, log_masses, strict=True):
            if b <= zs:
                below.append(lm)
            elif a >= zs:
                above.append(lm)
            else:
                below.append(log_interval_mass(a, zs))
                above.append(log_interval_mass(zs, b))
        log_below = float(logsumexp(below)) if below else -math.inf
        log_above = float(logsumexp(above)) if above else -math.inf
        return log_below, log_above, log_total

    def cdf(self, z: float) -> float:
        log_below, _, log_total = self._log_split(z)
        return float(min(1.0, math.exp(log_below - log_total)))

    def sf(self, z: float) -> float:
        _, log_above, log_total = self._log_split(z)
        return float(min(1.0, math.exp(log_above - log_total)))

    def log_cdf(self, z: float) -> float:
        log_below, _, log_total = self._log_split(z)
        return log_below - log_total

    def log_sf(self, z: float) -> float:
        _, log_above, log_total = self._log_split(z)
        return log_above - log_total

    def quantile(self, q: float) -> float:
        if not 0.0 <= q <= 1.0:
            raise InvalidConfigurationError(f"quantile level {q} outside [0, 1]")
        pieces = self._pieces
        log_masses = _log_masses(pieces)
        probs = np.exp(log_masses - _log_total(log_masses))
        cum = np.cumsum(probs)
        k = min(int(np.searchsorted(cum, q, side="left")), len(pieces) - 1)
        start = cum[k] - probs[k]
        frac = 0.0 if probs[k] == 0 else float(np.clip((q - start) / probs[k], 0.0, 1.0))
        a, b = pieces[k]
        return self.mu + self.sigma * float(_inverse_piece(a, b, np.array(frac)))

    def partial_moment(self, lo: float, hi: float) -> float:
        """E[Z; lo < Z < hi] under the truncated law."""
        pieces = self._pieces
        log_total = _log_total(_log_masses(pieces))
        los, his = (lo - self.mu) / self.sigma, (hi - self.mu) / self.sigma
        total = 0.0
        for a, b in pieces:
            a, b = max(a, los), min(b, his)
            if not a < b:
                continue
            mass = math.exp(log_interval_mass(a, b) - log_total)
            dens_a = math.exp(float(log_gaussian_pdf(a)) - log_total) if math.isfinite(a) else 0.0
            dens_b = math.exp(float(log_gaussian_pdf(b)) - log_total) if math.isfinite(b) else 0.0
            total += self.mu * mass + self.sigma * (dens_a - dens_b)
        return total

    def mean(self) -> float:
        return self.partial_moment(-math.inf, math.inf)

    def umpu_cutoffs(self, alpha: float) -> tuple[float, float]:
        """(c1, c2) with P(c1 < Z < c2) = 1 − α and E[Z; c1 < Z < c2] = (1 − α)E[Z]."""
        if not 0.0 < alpha < 1.0:
            raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
        target = (1.0 - alpha) * self.mean()

        def gap(a1: float) -> float:
            c1, c2 = self.quantile(a1), self.quantile(1.0 - alpha + a1)
            return self.partial_moment(c1, c2) - target

        g_lo, g_hi = gap(0.0), gap(alpha)
        if g_lo >= 0.0:
            a1 = 0.0
        elif g_hi <= 0.0:
            a1 = alpha
        else:
            a1 = brentq(gap, 0.0, alpha, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        return self.quantile(a1), self.quantile(1.0 - alpha + a1)


def sample_truncated_normal(
    support: IntervalUnion,
    mu: float,
    sigma: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> float | np.ndarray:
    """Exact draws from N(mu, sigma²) restricted to ``support``."""
    _check_law(mu, sigma, support)
    pieces = _standardize(support, mu, sigma)
    count = 1 if size is None else size
    if len(pieces) == 1:
        choice = np.zeros(count, dtype=int)
    else:
        log_masses = _log_masses(pieces)
        probs = np.exp(log_masses - _log_total(log_masses))
        choice = rng.choice(len(pieces), size=count, p=probs / probs.sum())
    u = rng.random(count)
    x = np.empty(count)
    for k, (a, b) in enumerate(pieces):
        hit = choice == k
        if np.any(hit):
            x[hit] = _inverse_piece(a, b, u[hit])
    draws = mu + sigma * x
    return float(draws[0]) if size is None else draws


# ==================== 区间与信息量 ====================


def _find_root(f, center: float, half: float, label: str) -> float:
    settings = get_settings().saturated
    for width in (half, half * settings.bracket_widen_factor):
        lo, hi = center - width, center + width
        f_lo, f_hi = f(lo), f(hi)
        if f_lo == 0.0:
            return lo
        if f_hi == 0.0:
            return hi
        if np.sign(f_lo) != np.sign(f_hi) and math.isfinite(f_lo) and math.isfinite(f_hi):
            return float(brentq(f, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500))
        log.info(f"{label}: no sign change within ±{width:.4g} of {center:.6g}, widening")
    raise BracketNotFoundError(f"{label}: root not bracketed within ±{half * settings.bracket_widen_factor:.4g}")


def truncated_gaussian_interval(
    z: float,
    sigma: float,
    support: IntervalUnion,
    alpha: float,
    method: str = "equal_tailed",
) -> tuple[float, float]:
    """Confidence interval for the mean of a truncated Gaussian observed at z.

    ``equal_tailed`` inverts the pivot; ``umau`` inverts the UMPU test.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    half = get_settings().saturated.bracket_halfwidth * sigma
    log_half = math.log(alpha / 2.0)

    if method == "equal_tailed":
        def lower_eq(mu: float) -> float:
            return TruncatedGaussian(mu, sigma, support).log_sf(z) - log_half

        def upper_eq(mu: float) -> float:
            return TruncatedGaussian(mu, sigma, support).log_cdf(z) - log_half

    elif method == "umau":
        def lower_eq(mu: float) -> float:
            return z - TruncatedGaussian(mu, sigma, support).umpu_cutoffs(alpha)[1]

        def upper_eq(mu: float) -> float:
            return z - TruncatedGaussian(mu, sigma, support).umpu_cutoffs(alpha)[0]

    else:
        raise InvalidConfigurationError(f"unknown interval method {method!r}")

    lower = _find_root(lower_eq, z, half, "lower confidence bound")
    upper = _find_root(upper_eq, z, half, "upper confidence bound")
    return lower, upper


def leftover_information(mu: float, threshold: float) -> float:
    """Fisher information about mu left in N(mu, 1) given Y > threshold.

    Equals 1 − h′(x) with x = threshold − mu and h the hazard φ/Φ̄, i.e. the
    variance 1 − h(h − x) of the truncated law.
    """
    x = threshold - mu
    if x > 1e4:
        return 1.0 / x**2 - 6.0 / x**4
    hazard = 1.0 / float(mills_ratio(x))
    return float(min(1.0, max(0.0, 1.0 - hazard * (hazard - x))))


def gaussian_family(
    support: IntervalUnion | None = None,
    sigma: float = 1.0,
    n_samples: int | None = None,
) -> NaturalFamily1D:
    """N(θσ², σ²) truncated to ``support``, with natural parameter θ for z."""
    support = IntervalUnion.real_line() if support is None else support
    n = get_settings().umpu.samples_per_reference if n_samples is None else n_samples

    def sampler(theta: float, rng: np.random.Generator) -> TiltedSampleSet:
        draws = sample_truncated_normal(support, theta * sigma**2, sigma, rng, size=n)
        return TiltedSampleSet.from_weights(draws, None, reference_theta=theta)

    return NaturalFamily1D(
        sampler=sampler,
        description=f"Gaussian statistic truncated to {support.to_list()}",
    )
