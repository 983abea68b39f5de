"""One-parameter exponential families and the importance-weighted empirical family.

A ``TiltedSampleSet`` holds draws ``Z_i`` of a sufficient statistic with
importance weights ``W_i``, generated under ``reference_theta``. Tilting it by
``exp((θ - reference_theta) z)`` gives the empirical exponential family through
the sample, which the Monte Carlo tests treat as the law of the statistic.

All weights are carried in log space; ratios go through log-sum-exp.
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from app.core.config import get_settings
from app.core.exceptions import DegenerateTiltError, InvalidConfigurationError, PreconditionError
from app.core.logger import get_module_logger

log = get_module_logger("umpu")


@dataclass(frozen=True)
class TiltedSampleSet:
    """Weighted reference sample of a one-dimensional sufficient statistic."""

    points: np.ndarray
    log_weights: np.ndarray
    reference_theta: float = 0.0

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float).ravel()
        log_weights = np.array(self.log_weights, dtype=float).ravel()
        if points.size == 0:
            raise PreconditionError("sample set must contain at least one point")
        if points.shape != log_weights.shape:
            raise PreconditionError(
                f"points ({points.size}) and weights ({log_weights.size}) differ in length"
            )
        if not np.all(np.isfinite(points)):
            raise PreconditionError("sample points must be finite")
        if np.any(np.isnan(log_weights)) or np.any(log_weights == np.inf):
            raise PreconditionError("weights must be finite and nonnegative")
        if np.all(np.isneginf(log_weights)):
            raise PreconditionError("at least one weight must be positive")
        if not math.isfinite(self.reference_theta):
            raise PreconditionError("reference_theta must be finite")
        points.setflags(write=False)
        log_weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "reference_theta", float(self.reference_theta))

    @classmethod
    def from_weights(
        cls,
        points: Sequence[float] | np.ndarray,
        weights: Sequence[float] | np.ndarray | None = None,
        reference_theta: float = 0.0,
    ) -> "TiltedSampleSet":
        """Build from plain (nonnegative) weights; ``None`` means unit weights."""
        points = np.asarray(points, dtype=float).ravel()
        if weights is None:
            return cls(points, np.zeros_like(points), reference_theta)
        weights = np.asarray(weights, dtype=float).ravel()
        if np.any(np.isnan(weights)) or np.any(weights < 0):
            raise PreconditionError("weights must be nonnegative")
        with np.errstate(divide="ignore"):
            log_weights = np.log(weights)
        return cls(points, log_weights, reference_theta)

    @property
    def n(self) -> int:
        return int(self.points.size)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def tilted_log_weights(self, theta: float) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            shifted = self.log_weights + (theta - self.reference_theta) * self.points
        return np.where(np.isneginf(self.log_weights), -np.inf, shifted)

    def normalized_weights(self, theta: float) -> np.ndarray:
        """Self-normalized tilted weights, summing to one."""
        log_w = self.tilted_log_weights(theta)
        top = np.max(log_w)
        if not np.isfinite(top) or np.any(np.isnan(log_w)):
            raise DegenerateTiltError(
                f"tilting to theta={theta} from reference {self.reference_theta} "
                "leaves no finite weight"
            )
        w = np.exp(log_w - top)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            raise DegenerateTiltError(f"all tilted weights vanish at theta={theta}")
        return w / total


@dataclass(frozen=True)
class NaturalFamily1D:
    """Exponential family exp{θz − ψ(θ)} against a carrier we can only sample.

    ``sampler(theta, rng)`` returns a ``TiltedSampleSet`` drawn at reference
    ``theta``.
    """

    sampler: Callable[[float, np.random.Generator], TiltedSampleSet]
    description: str = "sufficient statistic"
    parameter_range: tuple[float, float] = (-math.inf, math.inf)
    initial_theta: float | None = None

    def __post_init__(self) -> None:
        lo, hi = self.parameter_range
        if not lo < hi:
            raise InvalidConfigurationError(f"empty parameter range {self.parameter_range}")

    def contains(self, theta: float) -> bool:
        lo, hi = self.parameter_range
        return lo < theta < hi

    def clip(self, theta: float, margin: float = 1e-9) -> float:
        lo, hi = self.parameter_range
        span = margin * max(1.0, abs(theta))
        return float(min(max(theta, lo + span), hi - span))

    def start(self) -> float:
        if self.initial_theta is not None:
            return self.clip(self.initial_theta)
        return self.clip(0.0)

    def draw(self, theta: float, rng: np.random.Generator) -> TiltedSampleSet:
        if not self.contains(theta):
            raise InvalidConfigurationError(
                f"theta={theta} outside parameter range {self.parameter_range}"
            )
        return self.sampler(theta, rng)


def tilted_expectation(
    samples: TiltedSampleSet, h: Callable[[np.ndarray], np.ndarray | float], theta: float
) -> float:
    """Σ W_i h(Z_i) e^{θZ_i} / Σ W_i e^{θZ_i}, log-sum-exp stabilized."""
    w = samples.normalized_weights(theta)
    values = np.broadcast_to(np.asarray(h(samples.points), dtype=float), samples.points.shape)
    return float(np.dot(w, values))


def tilted_mean(samples: TiltedSampleSet, theta: float) -> float:
    return float(np.dot(samples.normalized_weights(theta), samples.points))


def tilted_variance(samples: TiltedSampleSet, theta: float) -> float:
    """Variance of the statistic under the tilted empirical family (its Fisher information)."""
    w = samples.normalized_weights(theta)
    mean = float(np.dot(w, samples.points))
    return float(np.dot(w, (samples.points - mean) ** 2))


def effective_sample_size(samples: TiltedSampleSet, theta: float) -> float:
    """(Σ w̃)² / Σ w̃² of the tilted weights."""
    w = samples.normalized_weights(theta)
    return float(1.0 / np.dot(w, w))


def check_ess(samples: TiltedSampleSet, theta: float) -> float:
    """ESS with a warning below the configured threshold."""
    ess = effective_sample_size(samples, theta)
    threshold = get_settings().umpu.ess_warning
    if ess < threshold:
        log.warning(f"effective sample size {ess:.1f} below {threshold:g} at theta={theta:.6g}")
    return ess


def pool_tilted(sets: Sequence[TiltedSampleSet]) -> TiltedSampleSet:
    """Combine sample sets drawn at several reference values.

    Each point gets the balance-heuristic weight W_i / Σ_k n_k g_k(Z_i), where
    g_k ∝ exp(θ_k z − ψ_k) against the shared carrier. The unknown ψ_k are
    estimated by the self-consistent fixed point over the pooled sample. The
    result is expressed at reference θ = 0.
    """
    if not sets:
        raise PreconditionError("pool_tilted needs at least one sample set")
    if len(sets) == 1:
        return sets[0]

    settings = get_settings().umpu
    thetas = np.array([s.reference_theta for s in sets])
    log_counts = np.log(np.array([s.n for s in sets], dtype=float))
    points = np.concatenate([s.points for s in sets])
    # per-set weights rescaled to mean one so each set carries n_k units of mass
    log_w = np.concatenate(
        [s.log_weights - logsumexp(s.log_weights) + math.log(s.n) for s in sets]
    )
    exponents = np.outer(points, thetas)

    psi = np.zeros(len(sets))
    log_den = logsumexp(log_counts + exponents - psi, axis=1)
    for iteration in range(settings.pool_max_iter):
        new_psi = logsumexp(log_w[:, None] + exponents - log_den[:, None], axis=0)
        new_psi -= new_psi[0]
        change = float(np.max(np.abs(new_psi - psi)))
        psi = new_psi
        log_den = logsumexp(log_counts + exponents - psi, axis=1)
        if change < settings.pool_tol:
            break
    else:
        log.warning(
            f"pooling {len(sets)} sets did not converge after {iteration + 1} iterations "
            f"(last change {change:.2e})"
        )

    return TiltedSampleSet(points, log_w - log_den, reference_theta=0.0)
