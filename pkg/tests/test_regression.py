import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm, t

from app.core.config import get_settings
from app.core.exceptions import (
    InsufficientResidualDimensionError,
    InvalidConfigurationError,
    NotInRegionError,
    RankDeficiencyError,
)
from app.schemas.sampling import ChainConfig
from app.services.regions import SelectionRegion
from app.services.regression import (
    RegressionProblem,
    check_full_rank,
    conditioning_slice,
    eta_vector,
    hat_sigma_sq,
    selected_t_test,
    selected_z_test,
)

N = 8
FAST = ChainConfig(burn_in=200, thin=2, n_samples=4000, seed=3)


def _design(rng, n: int = N) -> tuple[np.ndarray, np.ndarray]:
    X = rng.standard_normal((n, 2))
    y = X @ np.array([0.6, 0.3]) + rng.standard_normal(n)
    return X, y


def _pin_statistic(X: np.ndarray, y: np.ndarray, value: float) -> np.ndarray:
    """Move y along η so that ηᵀy = value; the residual is untouched."""
    eta = eta_vector(X, (0, 1), 0)
    return y + (value - eta @ y) * eta / (eta @ eta)


def test_eta_isolates_target(rng):
    X = rng.standard_normal((15, 4))
    eta = eta_vector(X, (0, 2, 3), 2)
    assert eta @ X[:, 2] == pytest.approx(1.0)
    assert eta @ X[:, 0] == pytest.approx(0.0, abs=1e-12)
    assert eta @ X[:, 3] == pytest.approx(0.0, abs=1e-12)
    y = rng.standard_normal(15)
    ols, *_ = np.linalg.lstsq(X[:, [0, 2, 3]], y, rcond=None)
    assert eta @ y == pytest.approx(ols[1])


def test_collinear_columns_are_named(rng):
    X = rng.standard_normal((10, 3))
    X[:, 2] = X[:, 0] + X[:, 1]
    with pytest.raises(RankDeficiencyError) as info:
        check_full_rank(X, (0, 1, 2))
    assert len(info.value.columns) == 1


def test_problem_validation(rng):
    X, y = _design(rng)
    with pytest.raises(InvalidConfigurationError):
        RegressionProblem(X=X, y=y, model=(0,), target=1)
    with pytest.raises(InvalidConfigurationError):
        RegressionProblem(X=X, y=y[:-1], model=(0,), target=0)
    with pytest.raises(InvalidConfigurationError):
        RegressionProblem(X=X, y=y, model=(0, 1), target=0, method="bonferroni")
    with pytest.raises(InvalidConfigurationError):
        RegressionProblem(X=X, y=y, model=(0, 1), target=0, sigma=0.0)


def test_hat_sigma_sq_and_slice(rng):
    X, y = _design(rng)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0)
    beta, rss, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert hat_sigma_sq(problem) == pytest.approx(float(rss[0]) / (N - 2))
    slice_ = conditioning_slice(problem)
    np.testing.assert_allclose(slice_.d, X[:, 1] @ y)
    assert slice_.contains(y)
    assert slice_.residual_norm is not None

    known = RegressionProblem(X=X, y=y, model=(0, 1), target=0, sigma=1.0)
    assert conditioning_slice(known).residual_norm is None
    single = RegressionProblem(X=X, y=y, model=(0,), target=0, sigma=1.0)
    assert conditioning_slice(single).is_trivial


def test_z_test_without_selection_is_classical(rng):
    X, y = _design(rng)
    eta = eta_vector(X, (0, 1), 0)
    y = _pin_statistic(X, y, 2.5 * np.linalg.norm(eta))
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0, sigma=1.0)
    classical = 2.0 * norm.sf(abs(eta @ y) / np.linalg.norm(eta))
    assert classical == pytest.approx(0.0124, abs=1e-4)
    outcome = selected_z_test(problem, SelectionRegion.whole_space(N), 0.05, FAST, with_interval=False)
    assert outcome.p_value == pytest.approx(classical, abs=0.025)
    assert outcome.diagnostics.seed == FAST.seed
    assert outcome.ci_lo is None


def test_z_test_is_reproducible(rng):
    X, y = _design(rng)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=1, sigma=1.0)
    config = ChainConfig(burn_in=50, thin=1, n_samples=500, seed=17)
    first = selected_z_test(problem, SelectionRegion.whole_space(N), 0.05, config, with_interval=False)
    second = selected_z_test(problem, SelectionRegion.whole_space(N), 0.05, config, with_interval=False)
    assert first.p_value == second.p_value


def test_z_test_two_means_selected_model():
    # select the larger coordinate with a positive sign, then test its mean
    region = SelectionRegion.from_polytopes([(np.array([[-1.0, 1.0], [-1.0, -1.0]]), np.zeros(2))])
    problem = RegressionProblem(X=np.eye(2), y=np.array([2.9, 2.5]), model=(0,), target=0, sigma=1.0)
    config = ChainConfig(burn_in=500, thin=3, n_samples=50_000, seed=8)
    outcome = selected_z_test(problem, region, 0.05, config, with_interval=False)

    def density(s: float) -> float:
        return norm.pdf(s) * (2.0 * norm.cdf(s) - 1.0)

    upper, _ = integrate.quad(density, 2.9, np.inf)
    expected = 2.0 * upper / 0.25
    assert expected == pytest.approx(0.0149, abs=5e-4)
    assert outcome.p_value == pytest.approx(expected, abs=0.005)
    assert outcome.reject


def test_z_test_requires_observation_in_region():
    region = SelectionRegion.from_polytopes([(np.array([[-1.0, 1.0], [-1.0, -1.0]]), np.zeros(2))])
    problem = RegressionProblem(X=np.eye(2), y=np.array([1.0, 2.5]), model=(0,), target=0, sigma=1.0)
    with pytest.raises(NotInRegionError):
        selected_z_test(problem, region, 0.05, FAST, with_interval=False)


def test_z_test_needs_sigma(rng):
    X, y = _design(rng)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0)
    with pytest.raises(InvalidConfigurationError):
        selected_z_test(problem, SelectionRegion.whole_space(N), 0.05, FAST)


def test_t_test_needs_residual_dimension():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    problem = RegressionProblem(X=X, y=np.array([1.0, 2.0, 2.5]), model=(0, 1), target=0)
    with pytest.raises(InsufficientResidualDimensionError):
        selected_t_test(problem, SelectionRegion.whole_space(3), 0.05)


def test_t_test_without_selection_is_classical(rng):
    X, y = _design(rng)
    eta = eta_vector(X, (0, 1), 0)
    se = np.sqrt(hat_sigma_sq(RegressionProblem(X=X, y=y, model=(0, 1), target=0))) * np.linalg.norm(eta)
    y = _pin_statistic(X, y, 2.8 * se)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0)
    assert np.sqrt(hat_sigma_sq(problem)) * np.linalg.norm(eta) == pytest.approx(se)
    classical = 2.0 * t.sf(2.8, df=N - 2)
    outcome = selected_t_test(problem, SelectionRegion.whole_space(N), 0.05, FAST, with_interval=False)
    assert outcome.p_value == pytest.approx(classical, abs=0.035)
    assert outcome.diagnostics.extra["discarded"] == 0


@pytest.mark.slow
def test_z_interval_without_selection(rng):
    X, y = _design(rng)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0, sigma=1.0)
    eta = eta_vector(X, (0, 1), 0)
    half = norm.isf(0.025) * np.linalg.norm(eta)
    outcome = selected_z_test(problem, SelectionRegion.whole_space(N), 0.05, FAST)
    assert outcome.ci_lo == pytest.approx(eta @ y - half, abs=0.2 * half)
    assert outcome.ci_hi == pytest.approx(eta @ y + half, abs=0.2 * half)


@pytest.mark.slow
def test_t_interval_without_selection(rng):
    X, y = _design(rng)
    problem = RegressionProblem(X=X, y=y, model=(0, 1), target=0)
    eta = eta_vector(X, (0, 1), 0)
    half = t.isf(0.025, df=N - 2) * np.sqrt(hat_sigma_sq(problem)) * np.linalg.norm(eta)
    config = ChainConfig(burn_in=100, thin=1, n_samples=2000, seed=4)
    outcome = selected_t_test(problem, SelectionRegion.whole_space(N), 0.05, config)
    assert outcome.ci_lo < eta @ y < outcome.ci_hi
    assert outcome.ci_lo == pytest.approx(eta @ y - half, abs=0.25 * half)
    assert outcome.ci_hi == pytest.approx(eta @ y + half, abs=0.25 * half)


def test_z_test_is_translation_equivariant(rng):
    X, y = _design(rng)
    X0 = X[:, 0]
    region = SelectionRegion.from_polytopes([(-X0[None, :], np.array([1.0 - X0 @ y]))])
    b = 0.4
    config = ChainConfig(burn_in=100, thin=1, n_samples=1000, seed=21)
    at_b = RegressionProblem(X=X, y=y, model=(0, 1), target=0, sigma=1.0, null_value=b)
    moved = RegressionProblem(X=X, y=y - b * X0, model=(0, 1), target=0, sigma=1.0)
    first = selected_z_test(at_b, region, 0.05, config, with_interval=False)
    second = selected_z_test(moved, region.shift(-b * X0), 0.05, config, with_interval=False)
    assert first.p_value == pytest.approx(second.p_value, abs=1e-12)
    assert first.reject == second.reject
    assert first.diagnostics.extra["statistic"] == pytest.approx(second.diagnostics.extra["statistic"])


@pytest.mark.slow
def test_z_interval_is_dual_to_the_test():
    get_settings().umpu.samples_per_reference = 5000
    region = SelectionRegion.from_polytopes([(np.array([[-1.0, 1.0], [-1.0, -1.0]]), np.zeros(2))])
    y = np.array([2.9, 2.5])
    config = ChainConfig(burn_in=200, thin=2, n_samples=5000, seed=13)
    outcome = selected_z_test(
        RegressionProblem(X=np.eye(2), y=y, model=(0,), target=0, sigma=1.0), region, 0.05, config
    )
    lo, hi = outcome.ci_lo, outcome.ci_hi
    assert math.isfinite(lo) and math.isfinite(hi)
    assert outcome.reject
    assert 0.0 < lo < hi
    for b in (lo - 1.0, 0.5 * (lo + hi), hi + 1.0):
        problem = RegressionProblem(X=np.eye(2), y=y, model=(0,), target=0, sigma=1.0, null_value=b)
        tested = selected_z_test(problem, region, 0.05, config, with_interval=False)
        assert tested.reject == (not lo <= b <= hi)


# ==================== 选择下的 t 检验 ====================

SPHERE_N = 5
SPHERE_Y = np.array([1.8, 0.6, -0.5, 0.4, 0.3])


def _first_above_one(n: int = SPHERE_N) -> SelectionRegion:
    """{y : y1 > 1}."""
    return SelectionRegion.from_polytopes([(-np.eye(n)[:1], np.array([-1.0]))])


def _sphere_p_value(y: np.ndarray) -> float:
    """Equal-tailed p-value of y1 given ‖y‖ and y1 > 1, X = e1, β = 0.

    y/‖y‖ is uniform on the sphere, so its first coordinate has density
    ∝ (1 − u²)^((n−3)/2).
    """
    n = len(y)
    length = float(np.linalg.norm(y))

    def density(u: float) -> float:
        return (1.0 - u * u) ** ((n - 3) / 2.0)

    total, _ = integrate.quad(density, 1.0 / length, 1.0)
    upper, _ = integrate.quad(density, y[0] / length, 1.0)
    upper /= total
    return 2.0 * min(upper, 1.0 - upper)


def test_t_test_matches_sphere_law_under_selection():
    problem = RegressionProblem(X=np.eye(SPHERE_N)[:, :1], y=SPHERE_Y, model=(0,), target=0)
    config = ChainConfig(burn_in=200, thin=2, n_samples=8000, seed=5)
    outcome = selected_t_test(problem, _first_above_one(), 0.1, config, with_interval=False)
    expected = _sphere_p_value(SPHERE_Y)
    assert expected == pytest.approx(0.1115, abs=1e-3)
    assert outcome.p_value == pytest.approx(expected, abs=0.025)
    assert outcome.diagnostics.extra["residual_dimension"] == SPHERE_N


@pytest.mark.slow
def test_t_test_is_uniform_under_selection(rng):
    reps, alpha = 300, 0.1
    X = np.eye(SPHERE_N)[:, :1]
    region = _first_above_one()
    rejections = 0
    for i in range(reps):
        y = rng.standard_normal(SPHERE_N)
        while y[0] <= 1.0:
            y = rng.standard_normal(SPHERE_N)
        problem = RegressionProblem(X=X, y=y, model=(0,), target=0)
        config = ChainConfig(burn_in=100, thin=2, n_samples=1000, seed=i + 1)
        rejections += selected_t_test(problem, region, alpha, config, with_interval=False).reject
    assert rejections / reps == pytest.approx(alpha, abs=3 * math.sqrt(alpha * (1 - alpha) / reps))


@pytest.mark.slow
def test_t_interval_under_selection_is_dual_to_the_test():
    problem = RegressionProblem(X=np.eye(SPHERE_N)[:, :1], y=SPHERE_Y, model=(0,), target=0)
    config = ChainConfig(burn_in=100, thin=2, n_samples=2000, seed=9)
    outcome = selected_t_test(problem, _first_above_one(), 0.1, config)
    lo, hi = outcome.ci_lo, outcome.ci_hi
    assert lo < hi
    assert math.isfinite(hi)
    se = math.sqrt(hat_sigma_sq(problem))
    outside = [hi + 0.5 * se] + ([lo - 0.5 * se] if math.isfinite(lo) else [])
    for b in outside:
        shifted = RegressionProblem(X=problem.X, y=SPHERE_Y, model=(0,), target=0, null_value=b)
        assert selected_t_test(shifted, _first_above_one(), 0.1, config, with_interval=False).reject
