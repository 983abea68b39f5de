import math

import numpy as np
import pytest
from scipy.stats import kstest, norm

from app.core.exceptions import InvalidConfigurationError, SaturatedTTestError
from app.services.regions import SelectionRegion
from app.services.regression import RegressionProblem, eta_vector
from app.services.saturated import (
    classical_z_p_value,
    saturated_t_test,
    saturated_z_interval,
    saturated_z_test,
)


def _larger_abs_first() -> SelectionRegion:
    return SelectionRegion.from_polytopes(
        [
            (np.array([[-1.0, 1.0], [-1.0, -1.0]]), np.zeros(2)),
            (np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2)),
        ]
    )


def _two_means(y: tuple[float, float], **kwargs) -> RegressionProblem:
    return RegressionProblem(X=np.eye(2), y=np.array(y), model=(0,), target=0, sigma=1.0, **kwargs)


def test_two_means_example():
    outcome = saturated_z_test(_two_means((2.9, 2.5)), _larger_abs_first(), 0.05)
    expected = 2.0 * norm.sf(2.9) / (2.0 * norm.sf(2.5))
    assert outcome.p_value == pytest.approx(expected, rel=1e-8)
    assert outcome.p_value == pytest.approx(0.30, abs=0.005)
    assert not outcome.reject
    assert outcome.method == "saturated_equal_tailed"
    assert outcome.diagnostics.extra["truncation"] == [[-math.inf, pytest.approx(-2.5)], [pytest.approx(2.5), math.inf]]


def test_whole_space_matches_classical_z(rng):
    X = rng.standard_normal((10, 3))
    y = X @ np.array([0.5, 1.0, 0.0]) + 1.5 * rng.standard_normal(10)
    problem = RegressionProblem(X=X, y=y, model=(0, 1, 2), target=1, sigma=1.5)
    eta = eta_vector(X, problem.model, problem.target)
    z = float(eta @ y)
    scale = 1.5 * float(np.linalg.norm(eta))
    outcome = saturated_z_test(problem, SelectionRegion.whole_space(10), 0.05)
    assert outcome.p_value == pytest.approx(2.0 * norm.sf(abs(z) / scale), abs=1e-10)
    assert outcome.ci_lo == pytest.approx(z - norm.isf(0.025) * scale, abs=1e-8)
    assert outcome.ci_hi == pytest.approx(z + norm.isf(0.025) * scale, abs=1e-8)
    assert classical_z_p_value(z, 0.0, scale) == pytest.approx(outcome.p_value, abs=1e-12)


def test_umpu_decision_on_symmetric_support():
    problem = _two_means((2.9, 2.5), method="umpu")
    outcome = saturated_z_test(problem, _larger_abs_first(), 0.05, with_interval=False)
    assert outcome.method == "saturated_umpu"
    c1, c2 = outcome.diagnostics.extra["umpu_cutoffs"]
    assert c1 == pytest.approx(-c2, abs=1e-6)
    assert not outcome.reject


def test_severe_bias_near_threshold():
    problem = RegressionProblem(X=np.ones((1, 1)), y=np.array([3.01]), model=(0,), target=0, sigma=1.0)
    region = SelectionRegion.from_polytopes([(np.array([[-1.0]]), [-3.0])])
    lo, hi = saturated_z_interval(problem, region, 0.05)
    assert lo < -5.0
    assert hi < 3.01 + 1.96


def test_nonzero_null_pins_eta_mu():
    problem = RegressionProblem(X=np.ones((1, 1)), y=np.array([5.0]), model=(0,), target=0, sigma=1.0, null_value=5.0)
    outcome = saturated_z_test(problem, SelectionRegion.whole_space(1), 0.05, with_interval=False)
    assert outcome.p_value == pytest.approx(1.0)


def test_pivot_is_uniform_under_the_null(rng):
    region = _larger_abs_first()
    draws = rng.standard_normal((4000, 2))
    draws = draws[np.abs(draws[:, 0]) > np.abs(draws[:, 1])]
    pivots = [
        saturated_z_test(_two_means(tuple(y)), region, 0.05, with_interval=False).diagnostics.extra["pivot"]
        for y in draws
    ]
    assert kstest(pivots, "uniform").pvalue > 0.001


def test_saturated_t_test_is_refused():
    problem = RegressionProblem(X=np.eye(3)[:, :2], y=np.ones(3), model=(0,), target=0)
    with pytest.raises(SaturatedTTestError):
        saturated_t_test(problem, SelectionRegion.whole_space(3), 0.05)


def test_unknown_sigma_rejected():
    problem = RegressionProblem(X=np.eye(2), y=np.array([2.9, 2.5]), model=(0,), target=0)
    with pytest.raises(InvalidConfigurationError):
        saturated_z_test(problem, _larger_abs_first(), 0.05)
