"""Constrained Gaussian samplers.

``hit_and_run`` targets N(mean, σ²I) restricted to a selection region and,
optionally, to an affine slice {y : Cy = d}. Directions are isotropic in the
null space of C, so the slice equalities hold by construction. Along each
direction the target is a 1-D Gaussian truncated to the chord, which is drawn
exactly.

``uniform_ball_hit_and_run`` and ``sphere_project_weights`` implement the
ball-to-sphere reduction used by the selective t-test: uniform draws in the
unit ball ∩ C are projected to the sphere and reweighted by the inverse
radial mass of the ray through each projected point.
"""

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from app.core.config import get_settings
from app.core.exceptions import (
    FarTailError,
    InfeasibleStartError,
    InvalidConfigurationError,
    NotInRegionError,
    RejectionSamplingError,
)
from app.core.logger import get_module_logger
from app.schemas.sampling import ChainConfig
from app.services.expfam import TiltedSampleSet
from app.services.regions import IntervalUnion, Polytope, SelectionRegion
from app.services.truncated import sample_truncated_normal

log = get_module_logger("sampler")

AffineSlice = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class WeightedDraws:
    """Draws (rows of ``points``) with nonnegative importance weights."""

    points: np.ndarray
    weights: np.ndarray
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if points.shape[0] != weights.size:
            raise InvalidConfigurationError(
                f"{points.shape[0]} draws but {weights.size} weights"
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvalidConfigurationError("draw weights must be finite and nonnegative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def normalized_weights(self) -> np.ndarray:
        total = self.weights.sum()
        if total <= 0:
            raise InvalidConfigurationError("all draw weights are zero")
        return self.weights / total

    def weighted_mean(self, values: np.ndarray | None = None) -> np.ndarray | float:
        """Self-normalized mean of ``values`` (default: the points)."""
        w = self.normalized_weights()
        if values is None:
            return w @ self.points
        return float(w @ np.asarray(values, dtype=float))

    def project(self, eta: np.ndarray) -> np.ndarray:
        return self.points @ np.asarray(eta, dtype=float)

    def to_sample_set(self, eta: np.ndarray, reference_theta: float = 0.0) -> TiltedSampleSet:
        """The 1-D statistic ηᵀY as a reference sample for the empirical family."""
        return TiltedSampleSet.from_weights(self.project(eta), self.weights, reference_theta)


def lag1_autocorrelation(series: np.ndarray) -> float:
    x = np.asarray(series, dtype=float)
    if x.size < 3:
        return math.nan
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        return 0.0
    return float(x[:-1] @ x[1:] / denom)


# ==================== 初始点 ====================


def _slice_basis(dim: int, affine_fix: AffineSlice | None) -> np.ndarray:
    if affine_fix is None:
        return np.eye(dim)
    C, _ = affine_fix
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0:
        return np.eye(dim)
    return null_space(C)


def _on_slice(y: np.ndarray, affine_fix: AffineSlice | None) -> bool:
    if affine_fix is None:
        return True
    C, d = affine_fix
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0:
        return True
    residual = C @ y - np.asarray(d, dtype=float)
    scale = max(1.0, float(np.max(np.abs(d))) if np.size(d) else 1.0)
    return bool(np.max(np.abs(residual)) <= 1e-8 * scale)


def _project_to_slice(y: np.ndarray, affine_fix: AffineSlice | None) -> np.ndarray:
    if affine_fix is None:
        return y
    C, d = affine_fix
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0:
        return y
    correction, *_ = np.linalg.lstsq(C, C @ y - np.asarray(d, dtype=float), rcond=None)
    return y - correction


def _chebyshev_point(part: Polytope, origin: np.ndarray, basis: np.ndarray) -> np.ndarray | None:
    """Deepest point of the polytope ∩ {origin + basis·v}, radius capped at one."""
    if part.n_constraints == 0:
        return origin
    A = part.A @ basis
    b = part.b - part.A @ origin
    norms = np.linalg.norm(A, axis=1)
    r = basis.shape[1]
    # variables (v, ρ): maximize ρ subject to A v + ρ‖A_i‖ ≤ b
    c = np.zeros(r + 1)
    c[-1] = -1.0
    result = linprog(
        c,
        A_ub=np.hstack([A, norms[:, None]]),
        b_ub=b,
        bounds=[(None, None)] * r + [(0.0, 1.0)],
        method="highs",
    )
    if result.status != 0:
        return None
    return origin + basis @ result.x[:r]


def find_start(
    mean: np.ndarray,
    region: SelectionRegion,
    affine_fix: AffineSlice | None = None,
) -> np.ndarray:
    """A point in region ∩ slice: the projected mean if feasible, else a Chebyshev centre."""
    settings = get_settings().sampler
    candidate = _project_to_slice(np.asarray(mean, dtype=float), affine_fix)
    if region.contains(candidate):
        return candidate
    basis = _slice_basis(region.dim, affine_fix)
    for attempt, part in enumerate(region.parts):
        if attempt >= settings.max_start_attempts:
            break
        point = _chebyshev_point(part, candidate, basis)
        if point is not None and region.contains(point):
            log.debug(f"start found at polytope {attempt} by Chebyshev centre")
            return point
    raise InfeasibleStartError(
        f"no feasible start in region ∩ slice after {min(len(region.parts), settings.max_start_attempts)} "
        "polytope attempts"
    )


# ==================== Hit-and-run ====================


def _recorded(step: int, config: ChainConfig) -> bool:
    offset = step - config.burn_in
    return offset >= 0 and offset % config.thin == config.thin - 1


def hit_and_run(
    mean: np.ndarray,
    sigma: float,
    region: SelectionRegion,
    affine_fix: AffineSlice | None = None,
    config: ChainConfig | None = None,
    start: np.ndarray | None = None,
    eta: np.ndarray | None = None,
) -> WeightedDraws:
    """Hit-and-run chain for N(mean, σ²I) on region ∩ {Cy = d}; unit weights.

    ``eta`` selects the statistic whose lag-1 autocorrelation is reported.
    """
    mean = np.asarray(mean, dtype=float)
    if not sigma > 0:
        raise InvalidConfigurationError(f"sigma must be positive, got {sigma}")
    if mean.size != region.dim:
        raise InvalidConfigurationError(f"mean has dimension {mean.size}, region {region.dim}")
    config = config or ChainConfig.from_settings()
    rng = np.random.default_rng(config.seed)

    if start is None:
        y = find_start(mean, region, affine_fix)
    else:
        y = np.array(start, dtype=float)
        if not region.contains(y) or not _on_slice(y, affine_fix):
            raise NotInRegionError("supplied start lies outside region ∩ slice")
    basis = _slice_basis(region.dim, affine_fix)

    points = np.empty((config.n_samples, region.dim))
    if basis.shape[1] == 0:
        points[:] = y
        return WeightedDraws(points, np.ones(config.n_samples), {"flags": ["degenerate_slice"]})

    rejected = 0
    kept = 0
    for step in range(config.total_steps):
        direction = basis @ rng.standard_normal(basis.shape[1])
        norm_sq = float(direction @ direction)
        chord = region.chord(y, direction)
        if chord.is_empty or norm_sq == 0.0:
            rejected += 1
            log.debug(f"empty chord at step {step}; step rejected")
        else:
            center = -float((y - mean) @ direction) / norm_sq
            try:
                t = sample_truncated_normal(chord, center, sigma / math.sqrt(norm_sq), rng)
                y = y + t * direction
            except FarTailError:
                rejected += 1
                log.debug(f"chord carries no Gaussian mass at step {step}; step rejected")
        if _recorded(step, config):
            points[kept] = y
            kept += 1

    if rejected:
        log.warning(f"hit-and-run rejected {rejected} of {config.total_steps} steps")
    track = points @ eta if eta is not None else points[:, 0]
    diagnostics = {
        "rejected_steps": rejected,
        "total_steps": config.total_steps,
        "lag1_autocorrelation": lag1_autocorrelation(track),
        "seed": config.seed,
    }
    return WeightedDraws(points, np.ones(config.n_samples), diagnostics)


def _ball_chord(z: np.ndarray, direction: np.ndarray) -> tuple[float, float]:
    """{t : ‖z + t·d‖ ≤ 1} for unit d."""
    zd = float(z @ direction)
    disc = max(zd * zd - (float(z @ z) - 1.0), 0.0)
    root = math.sqrt(disc)
    return -zd - root, -zd + root


def _uniform_on(union: IntervalUnion, rng: np.random.Generator) -> float:
    lengths = np.array([hi - lo for lo, hi in union.intervals])
    k = int(rng.choice(lengths.size, p=lengths / lengths.sum())) if lengths.size > 1 else 0
    lo, hi = union.intervals[k]
    return float(lo + (hi - lo) * rng.random())


def uniform_ball_hit_and_run(
    region: SelectionRegion,
    start: np.ndarray,
    config: ChainConfig | None = None,
) -> WeightedDraws:
    """Hit-and-run for the uniform law on unit ball ∩ region; unit weights."""
    config = config or ChainConfig.from_settings()
    rng = np.random.default_rng(config.seed)
    z = np.array(start, dtype=float)
    if float(z @ z) > 1.0 + 1e-12 or not region.contains(z):
        raise NotInRegionError("start lies outside unit ball ∩ region")

    points = np.empty((config.n_samples, region.dim))
    rejected = 0
    kept = 0
    for step in range(config.total_steps):
        direction = rng.standard_normal(region.dim)
        direction /= np.linalg.norm(direction)
        lo, hi = _ball_chord(z, direction)
        chord = region.chord(z, direction).intersect(lo, hi)
        if chord.is_empty:
            rejected += 1
        else:
            z = z + _uniform_on(chord, rng) * direction
        if _recorded(step, config):
            points[kept] = z
            kept += 1
    if rejected:
        log.warning(f"ball hit-and-run rejected {rejected} of {config.total_steps} steps")
    diagnostics = {"rejected_steps": rejected, "total_steps": config.total_steps, "seed": config.seed}
    return WeightedDraws(points, np.ones(config.n_samples), diagnostics)


def radial_mass(rays: IntervalUnion, k: int) -> float:
    """∫ r^{k−1} dr over the ray intervals, i.e. Σ (b^k − a^k)/k.

    The normalized radial density of a uniform ball draw is k·r^{k−1}; the
    constant cancels once weights are self-normalized.
    """
    return float(sum((hi**k - lo**k) / k for lo, hi in rays.intervals))


def sphere_project_weights(draws: WeightedDraws, k: int, region: SelectionRegion) -> WeightedDraws:
    """Project ball draws to the unit sphere and reweight to the uniform sphere law on C."""
    if k != draws.dim:
        raise InvalidConfigurationError(f"dimension {k} does not match draws of dimension {draws.dim}")
    kept_points, kept_weights = [], []
    discarded = 0
    for y, w in zip(draws.points, draws.weights, strict=True):
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            discarded += 1
            continue
        z = y / norm
        if not region.contains(z):
            discarded += 1
            continue
        mass = radial_mass(region.ray_intervals(z, 1.0), k)
        if not mass > 0.0:
            discarded += 1
            continue
        kept_points.append(z)
        kept_weights.append(w / mass)
    if not kept_points:
        raise RejectionSamplingError("every draw left the region after projection to the sphere")
    if discarded:
        log.info(f"sphere projection discarded {discarded} of {draws.n} draws")
    diagnostics = dict(draws.diagnostics)
    diagnostics["discarded"] = discarded
    return WeightedDraws(np.array(kept_points), np.array(kept_weights), diagnostics)


# ==================== 拒绝采样 ====================


def rejection_sample(
    mean: np.ndarray,
    sigma: float,
    region: SelectionRegion,
    n: int,
    seed: int | None = None,
) -> WeightedDraws:
    """I.i.d. draws from N(mean, σ²I) restricted to the region; unit weights.

    Refuses when the pilot acceptance rate falls below the configured minimum;
    use ``hit_and_run`` then.
    """
    settings = get_settings()
    mean = np.asarray(mean, dtype=float)
    if not sigma > 0:
        raise InvalidConfigurationError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    threshold = settings.sampler.rejection_min_acceptance

    pilot = mean + sigma * rng.standard_normal((settings.sampler.rejection_pilot, mean.size))
    inside = region.contains_many(pilot)
    acceptance = float(inside.mean())
    if acceptance < threshold:
        raise RejectionSamplingError(
            f"pilot acceptance {acceptance:.2e} below {threshold:.0e}; use hit_and_run instead"
        )

    accepted = [pilot[inside]]
    count = int(inside.sum())
    tried = pilot.shape[0]
    batch = settings.sampler.rejection_batch
    while count < n:
        proposals = mean + sigma * rng.standard_normal((batch, mean.size))
        hit = region.contains_many(proposals)
        accepted.append(proposals[hit])
        count += int(hit.sum())
        tried += batch
    points = np.concatenate(accepted)[:n]
    diagnostics = {"acceptance": count / tried, "proposals": tried, "seed": seed}
    return WeightedDraws(points, np.ones(n), diagnostics)
