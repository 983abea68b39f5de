"""Selected-model regression inference.

Under the selected model μ = X_M β, inference on β_j conditions on the
nuisance statistics X_{M∖j}ᵀY (and ‖Y‖ when σ² is unknown). The remaining
variation lies along η = X_{j·M}/‖X_{j·M}‖², whose inner product with Y is
the least-squares estimate of β_j. Non-zero nulls β_j = b are tested on
Ỹ = Y − bX_j against the selection region shifted by −bX_j.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space, qr

from app.core.config import get_settings
from app.core.exceptions import (
    BracketNotFoundError,
    InsufficientResidualDimensionError,
    InvalidConfigurationError,
    NotInRegionError,
    RankDeficiencyError,
)
from app.core.logger import get_module_logger
from app.core.rng import derive_rng, spawn_seed
from app.schemas.outcomes import TestOutcome
from app.schemas.sampling import ChainConfig
from app.services.expfam import NaturalFamily1D, TiltedSampleSet
from app.services.regions import SelectionRegion
from app.services.samplers import (
    WeightedDraws,
    hit_and_run,
    sphere_project_weights,
    uniform_ball_hit_and_run,
)
from app.services.umpu import (
    equal_tailed_confidence_interval,
    equal_tailed_test,
    umpu_confidence_interval,
    umpu_test,
)

log = get_module_logger("umpu")

METHODS = ("equal_tailed", "umpu")
_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
_MAX_BRACKET_STEPS = 40


@dataclass(frozen=True)
class RegressionProblem:
    """Design, response, selected model and target; ``sigma=None`` means unknown.

    Indices are 0-based column positions. ``null_value`` is the hypothesized
    β_j (ηᵀμ for saturated-model procedures).
    """

    X: np.ndarray
    y: np.ndarray
    model: tuple[int, ...]
    target: int
    sigma: float | None = None
    null_value: float = 0.0
    method: str = "equal_tailed"

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        model = tuple(int(k) for k in self.model)
        if X.shape[0] != y.size:
            raise InvalidConfigurationError(f"design has {X.shape[0]} rows but response has {y.size}")
        if not model:
            raise InvalidConfigurationError("selected model is empty")
        if len(set(model)) != len(model):
            raise InvalidConfigurationError(f"selected model {model} repeats a column")
        if any(k < 0 or k >= X.shape[1] for k in model):
            raise InvalidConfigurationError(f"selected model {model} outside columns 0..{X.shape[1] - 1}")
        if self.target not in model:
            raise InvalidConfigurationError(f"target {self.target} is not in the selected model {model}")
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidConfigurationError(f"sigma must be positive, got {self.sigma}")
        if self.method not in METHODS:
            raise InvalidConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "model", model)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def others(self) -> tuple[int, ...]:
        return tuple(k for k in self.model if k != self.target)

    @property
    def X_model(self) -> np.ndarray:
        return self.X[:, list(self.model)]

    @property
    def X_others(self) -> np.ndarray:
        return self.X[:, list(self.others)]

    @property
    def X_target(self) -> np.ndarray:
        return self.X[:, self.target]

    def shifted_response(self, b: float | None = None) -> np.ndarray:
        """Ỹ = y − b·X_j."""
        b = self.null_value if b is None else b
        return self.y - b * self.X_target

    def shifted_region(self, region: SelectionRegion, b: float | None = None) -> SelectionRegion:
        b = self.null_value if b is None else b
        return region.shift(-b * self.X_target)


@dataclass(frozen=True)
class ConditioningSlice:
    """{y : Cy = d}, plus the fixed residual norm for the t-test."""

    C: np.ndarray
    d: np.ndarray
    residual_norm: float | None = None

    @property
    def is_trivial(self) -> bool:
        return self.C.shape[0] == 0

    def contains(self, y: np.ndarray, tol: float = 1e-8) -> bool:
        if self.is_trivial:
            return True
        scale = max(1.0, float(np.max(np.abs(self.d))))
        return bool(np.max(np.abs(self.C @ y - self.d)) <= tol * scale)

    def as_affine(self) -> tuple[np.ndarray, np.ndarray] | None:
        return None if self.is_trivial else (self.C, self.d)


def check_full_rank(X: np.ndarray, columns: tuple[int, ...]) -> None:
    if X.shape[1] == 0:
        return
    _, R, pivots = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        collinear = tuple(sorted(columns[int(i)] for i in pivots[rank:]))
        raise RankDeficiencyError(
            f"selected columns are collinear; drop one of {collinear}", columns=collinear
        )


def _project(basis: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Orthogonal projection of v onto the column span of ``basis``."""
    if basis.shape[1] == 0:
        return np.zeros_like(v)
    coef, *_ = np.linalg.lstsq(basis, v, rcond=None)
    return basis @ coef


def eta_vector(X: np.ndarray, model: tuple[int, ...], target: int) -> np.ndarray:
    """η = X_{j·M}/‖X_{j·M}‖², so that ηᵀX_j = 1 and ηᵀX_k = 0 for k ∈ M∖j."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    model = tuple(model)
    if target not in model:
        raise InvalidConfigurationError(f"target {target} is not in the selected model {model}")
    check_full_rank(X[:, list(model)], model)
    others = [k for k in model if k != target]
    adjusted = X[:, target] - _project(X[:, others], X[:, target])
    return adjusted / float(adjusted @ adjusted)


def hat_sigma_sq(problem: RegressionProblem) -> float:
    """‖P⊥_{X_M} y‖²/(n − |M|).

    Provided for diagnostics only: the selected-model t-test conditions on
    ‖Y‖ and never plugs this estimate in, and it should not be read as an
    estimate of σ² after selection.
    """
    dof = problem.n - len(problem.model)
    if dof < 1:
        raise InsufficientResidualDimensionError(f"n − |M| = {dof}; no residual degrees of freedom")
    residual = problem.y - _project(problem.X_model, problem.y)
    rss = float(residual @ residual)

    eta = eta_vector(problem.X, problem.model, problem.target)
    decomposed = (
        float(problem.y @ problem.y)
        - float(np.sum(_project(problem.X_others, problem.y) ** 2))
        - float(eta @ problem.y) ** 2 / float(eta @ eta)
    )
    if abs(decomposed - rss) > 1e-8 * max(1.0, float(problem.y @ problem.y)):
        log.warning(f"residual decomposition mismatch: {decomposed:.6g} vs {rss:.6g}")
    return rss / dof


def conditioning_slice(problem: RegressionProblem, b: float | None = None) -> ConditioningSlice:
    """Fixed statistics X_{M∖j}ᵀỸ, and ‖P⊥_{M∖j}Ỹ‖ when σ is unknown."""
    y_tilde = problem.shifted_response(b)
    C = problem.X_others.T
    d = C @ y_tilde
    norm = None
    if problem.sigma is None:
        residual = y_tilde - _project(problem.X_others, y_tilde)
        norm = float(np.linalg.norm(residual))
    return ConditioningSlice(C=C, d=d, residual_norm=norm)


def _prepare(problem: RegressionProblem, region: SelectionRegion, b: float | None = None):
    eta = eta_vector(problem.X, problem.model, problem.target)
    y_tilde = problem.shifted_response(b)
    shifted = problem.shifted_region(region, b)
    if region.dim != problem.n:
        raise InvalidConfigurationError(f"region lives in {region.dim} dims, response in {problem.n}")
    if not shifted.contains(y_tilde):
        raise NotInRegionError("observed response lies outside the selection region")
    return eta, y_tilde, shifted


def _decide(
    method: str, z_obs: float, u: float, samples: TiltedSampleSet, alpha: float
) -> TestOutcome:
    if method == "umpu":
        return umpu_test(z_obs, u, samples, 0.0, alpha)
    return equal_tailed_test(z_obs, samples, 0.0, alpha)


# ==================== 已知 σ: z 检验 ====================


def selected_z_test(
    problem: RegressionProblem,
    region: SelectionRegion,
    alpha: float,
    config: ChainConfig | None = None,
    with_interval: bool = True,
) -> TestOutcome:
    """Selective z-test of β_j = b with known σ; interval for β_j on request."""
    if problem.sigma is None:
        raise InvalidConfigurationError("selected_z_test needs a known sigma; use selected_t_test")
    config = config or ChainConfig.from_settings()
    sigma = problem.sigma
    eta, y_tilde, shifted = _prepare(problem, region)
    slice_ = conditioning_slice(problem)
    center = _project(problem.X_others, y_tilde)
    norm_sq = float(eta @ eta)
    rng = derive_rng(0, seed=config.seed)
    u = float(rng.random())

    draws = hit_and_run(center, sigma, shifted, slice_.as_affine(), config, start=y_tilde, eta=eta)
    samples = draws.to_sample_set(eta)
    z_obs = float(eta @ y_tilde)
    outcome = _decide(problem.method, z_obs, u, samples, alpha)

    diagnostics = outcome.diagnostics.model_copy(deep=True)
    diagnostics.seed = config.seed
    diagnostics.extra.update(
        statistic=z_obs,
        null_value=problem.null_value,
        lag1_autocorrelation=draws.diagnostics.get("lag1_autocorrelation"),
        rejected_steps=draws.diagnostics.get("rejected_steps"),
    )
    ci = (None, None)
    if with_interval:
        family_seed = spawn_seed(rng)
        reference_size = get_settings().umpu.samples_per_reference

        def sampler(theta: float, chain_rng: np.random.Generator) -> TiltedSampleSet:
            chain = config.model_copy(
                update={"seed": spawn_seed(chain_rng), "n_samples": reference_size}
            )
            tilted = hit_and_run(
                center + theta * sigma**2 * eta, sigma, shifted, slice_.as_affine(), chain, start=y_tilde
            )
            return tilted.to_sample_set(eta, reference_theta=theta)

        family = NaturalFamily1D(sampler=sampler, description="ηᵀỸ on the selected-model slice")
        if problem.method == "umpu":
            lo, hi = umpu_confidence_interval(z_obs, u, family, alpha, seed=family_seed)
        else:
            lo, hi = equal_tailed_confidence_interval(z_obs, family, alpha, seed=family_seed)
        # θ = (β_j − b)/(σ²‖η‖²)
        scale = sigma**2 * norm_sq
        ci = (problem.null_value + scale * lo, problem.null_value + scale * hi)

    return outcome.model_copy(update={"ci_lo": ci[0], "ci_hi": ci[1], "diagnostics": diagnostics})


# ==================== 未知 σ: t 检验 ====================


@dataclass(frozen=True)
class _SphereReference:
    statistic: float
    draws: WeightedDraws
    samples: TiltedSampleSet


def _sphere_reference(
    problem: RegressionProblem,
    region: SelectionRegion,
    b: float,
    config: ChainConfig,
) -> _SphereReference:
    """Weighted null sample of ηᵀỸ given X_{M∖j}ᵀỸ, ‖Ỹ‖ and selection."""
    eta, y_tilde, shifted = _prepare(problem, region, b)
    fixed = _project(problem.X_others, y_tilde)
    residual = y_tilde - fixed
    length = float(np.linalg.norm(residual))
    if length == 0.0:
        raise InvalidConfigurationError("response lies in the span of the nuisance columns")
    basis = null_space(problem.X_others.T) if problem.others else np.eye(problem.n)
    k = basis.shape[1]
    # residual coordinates on the unit sphere of the complement
    pulled = shifted.pullback(fixed, length * basis)
    start = basis.T @ residual / length
    start /= np.linalg.norm(start)

    ball = uniform_ball_hit_and_run(pulled, start, config)
    sphere = sphere_project_weights(ball, k, pulled)
    direction = length * (basis.T @ eta)
    statistic = float(eta @ y_tilde)
    samples = TiltedSampleSet.from_weights(sphere.points @ direction, sphere.weights)
    return _SphereReference(statistic, sphere, samples)


def _t_rejects(
    problem: RegressionProblem, region: SelectionRegion, b: float, alpha: float, u: float, config: ChainConfig
) -> bool:
    ref = _sphere_reference(problem, region, b, config)
    return _decide(problem.method, ref.statistic, u, ref.samples, alpha).reject


def _bisect_boundary(reject, inside: float, outside: float, tol: float) -> float:
    while abs(outside - inside) > tol:
        mid = 0.5 * (inside + outside)
        if reject(mid):
            outside = mid
        else:
            inside = mid
    return 0.5 * (inside + outside)


def _t_interval(
    problem: RegressionProblem,
    region: SelectionRegion,
    alpha: float,
    u: float,
    config: ChainConfig,
) -> tuple[float, float]:
    """Values b not rejected, by golden-ratio bracketing then bisection.

    Every evaluation reuses ``config.seed`` so the decision is a fixed
    function of b.
    """
    eta = eta_vector(problem.X, problem.model, problem.target)
    estimate = float(eta @ problem.y)
    se = math.sqrt(max(hat_sigma_sq(problem), 1e-300)) * float(np.linalg.norm(eta))
    tol = 1e-3 * se

    def reject(b: float) -> bool:
        return _t_rejects(problem, region, b, alpha, u, config)

    inside = None
    for offset in (0.0, -1.0, 1.0, -2.0, 2.0, -4.0, 4.0, -8.0, 8.0):
        candidate = estimate + offset * se
        if not reject(candidate):
            inside = candidate
            break
    if inside is None:
        raise BracketNotFoundError("no accepted null value within ±8 standard errors of the estimate")

    bounds = []
    for direction in (-1.0, 1.0):
        step = se
        previous = inside
        bound = direction * math.inf
        for _ in range(_MAX_BRACKET_STEPS):
            candidate = inside + direction * step
            if reject(candidate):
                bound = _bisect_boundary(reject, previous, candidate, tol)
                break
            previous = candidate
            step *= _GOLDEN
        else:
            log.warning(f"t-interval {'upper' if direction > 0 else 'lower'} bound not bracketed; reporting infinity")
        bounds.append(bound)
    return bounds[0], bounds[1]


def selected_t_test(
    problem: RegressionProblem,
    region: SelectionRegion,
    alpha: float,
    config: ChainConfig | None = None,
    with_interval: bool = True,
) -> TestOutcome:
    """Selective t-test of β_j = b with σ² unknown; interval over b on request."""
    dof = problem.n - len(problem.model)
    if dof - 1 < 1:
        raise InsufficientResidualDimensionError(
            f"n − |M| − 1 = {dof - 1}; the t-test needs at least one spare residual dimension"
        )
    config = config or ChainConfig.from_settings()
    u = float(derive_rng(0, seed=config.seed).random())
    ref = _sphere_reference(problem, region, problem.null_value, config)
    outcome = _decide(problem.method, ref.statistic, u, ref.samples, alpha)

    diagnostics = outcome.diagnostics.model_copy(deep=True)
    diagnostics.seed = config.seed
    diagnostics.extra.update(
        statistic=ref.statistic,
        null_value=problem.null_value,
        residual_dimension=dof + 1,
        discarded=ref.draws.diagnostics.get("discarded", 0),
        sigma_hat_sq=hat_sigma_sq(problem),
    )
    ci = (None, None)
    if with_interval:
        ci = _t_interval(problem, region, alpha, u, config)
    return outcome.model_copy(update={"ci_lo": ci[0], "ci_hi": ci[1], "diagnostics": diagnostics})

