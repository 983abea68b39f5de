import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import kstest, norm

from app.core.exceptions import InvalidConfigurationError, PreconditionError
from app.services.regions import IntervalUnion
from app.services.truncated import (
    TruncatedGaussian,
    leftover_information,
    log_gaussian_sf,
    log_interval_mass,
    mills_ratio,
    sample_truncated_normal,
    trunc_gauss_cdf,
    truncated_gaussian_interval,
)

ABOVE_ONE = IntervalUnion.merge([(1.0, math.inf)])
ABOVE_THREE = IntervalUnion.merge([(3.0, math.inf)])


def test_log_sf_matches_scipy_in_far_tail():
    for x in (-3.0, 0.0, 2.0, 7.9, 8.1, 20.0, 40.0):
        assert log_gaussian_sf(x) == pytest.approx(norm.logsf(x), rel=1e-10)
    assert log_gaussian_sf(math.inf) == -math.inf


def test_mills_ratio():
    assert mills_ratio(0.0) == pytest.approx(0.5 / norm.pdf(0.0))
    # Φ̄(x)/φ(x) ~ 1/x for large x
    assert mills_ratio(1e4) == pytest.approx(1e-4, rel=1e-7)


def test_interval_mass_in_both_tails():
    assert math.exp(log_interval_mass(-1.0, 1.0)) == pytest.approx(norm.cdf(1) - norm.cdf(-1))
    far = log_interval_mass(40.0, 41.0)
    assert far == pytest.approx(norm.logsf(40.0) + math.log1p(-math.exp(norm.logsf(41.0) - norm.logsf(40.0))))
    assert log_interval_mass(-41.0, -40.0) == pytest.approx(far)
    assert log_interval_mass(1.0, 1.0) == -math.inf


def test_trunc_cdf_basic_values():
    assert trunc_gauss_cdf(0.0, 0.0, 1.0, IntervalUnion.real_line()) == pytest.approx(0.5)
    assert trunc_gauss_cdf(1.0, 0.0, 1.0, ABOVE_ONE) == 0.0
    expected = (norm.cdf(2.41) - norm.cdf(1.0)) / norm.sf(1.0)
    assert trunc_gauss_cdf(2.41, 0.0, 1.0, ABOVE_ONE) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.9499, abs=1e-4)


def test_trunc_cdf_far_tail_is_stable():
    support = IntervalUnion.merge([(40.0, math.inf)])
    law = TruncatedGaussian(0.0, 1.0, support)
    expected = math.exp(norm.logsf(41.0) - norm.logsf(40.0))
    assert law.sf(41.0) == pytest.approx(expected, rel=1e-8)
    assert 0.0 < law.sf(41.0) < 1e-15


def test_trunc_cdf_monotone():
    support = IntervalUnion.merge([(-math.inf, -1.0), (0.5, 2.0)])
    zs = np.linspace(-4.0, 2.0, 50)
    cdf = [trunc_gauss_cdf(z, 0.3, 1.2, support) for z in zs]
    assert np.all(np.diff(cdf) >= -1e-15)
    mus = np.linspace(-3.0, 3.0, 25)
    by_mu = [trunc_gauss_cdf(0.7, mu, 1.0, support) for mu in mus]
    assert np.all(np.diff(by_mu) <= 1e-15)


def test_quantile_inverts_cdf():
    law = TruncatedGaussian(0.5, 2.0, IntervalUnion.merge([(-math.inf, -1.0), (2.0, 6.0)]))
    for q in (0.01, 0.3, 0.5, 0.9, 0.999):
        assert law.cdf(law.quantile(q)) == pytest.approx(q, abs=1e-9)


def test_mean_matches_closed_form():
    law = TruncatedGaussian(0.0, 1.0, ABOVE_THREE)
    assert law.mean() == pytest.approx(norm.pdf(3.0) / norm.sf(3.0), rel=1e-10)


def test_umpu_cutoffs_satisfy_side_conditions():
    law = TruncatedGaussian(0.0, 1.0, ABOVE_ONE)
    c1, c2 = law.umpu_cutoffs(0.05)

    def density(x: float) -> float:
        return norm.pdf(x) / norm.sf(1.0)

    accepted, _ = integrate.quad(density, c1, c2, epsabs=1e-12)
    first, _ = integrate.quad(lambda x: x * density(x), c1, c2, epsabs=1e-12)
    assert accepted == pytest.approx(0.95, abs=1e-8)
    assert first == pytest.approx(0.95 * law.mean(), abs=1e-7)


def test_sampling_respects_support(rng):
    support = IntervalUnion.merge([(-math.inf, -2.0), (2.0, math.inf)])
    draws = sample_truncated_normal(support, 0.0, 1.0, rng, size=20_000)
    assert np.all(np.abs(draws) >= 2.0)
    assert np.mean(draws > 0) == pytest.approx(0.5, abs=0.02)
    law = TruncatedGaussian(0.0, 1.0, support)
    assert kstest(draws, np.vectorize(law.cdf)).pvalue > 0.001


def test_sampling_in_far_tail(rng):
    draws = sample_truncated_normal(IntervalUnion.merge([(30.0, math.inf)]), 0.0, 1.0, rng, size=1000)
    assert np.all(draws >= 30.0)
    assert np.all(np.isfinite(draws))
    assert float(np.mean(draws)) == pytest.approx(30.0 + 1 / 30.0, abs=0.01)


def test_law_preconditions():
    with pytest.raises(InvalidConfigurationError):
        TruncatedGaussian(0.0, -1.0, ABOVE_ONE)
    with pytest.raises(PreconditionError):
        TruncatedGaussian(0.0, 1.0, IntervalUnion(()))


def test_untruncated_interval_is_classical():
    lo, hi = truncated_gaussian_interval(1.3, 2.0, IntervalUnion.real_line(), 0.05)
    assert lo == pytest.approx(1.3 - 2.0 * norm.isf(0.025), abs=1e-8)
    assert hi == pytest.approx(1.3 + 2.0 * norm.isf(0.025), abs=1e-8)


def test_interval_far_from_threshold_is_nominal():
    lo, hi = truncated_gaussian_interval(8.0, 1.0, ABOVE_THREE, 0.05, "umau")
    assert lo == pytest.approx(8.0 - 1.96, abs=0.05)
    assert hi == pytest.approx(8.0 + 1.96, abs=0.05)


def test_interval_near_threshold_is_wide():
    lo, hi = truncated_gaussian_interval(3.01, 1.0, ABOVE_THREE, 0.05)
    assert lo < -5.0
    assert hi < 3.01 + 1.96


@pytest.mark.slow
def test_equal_tailed_coverage(rng):
    mu, reps, covered = 3.5, 2000, 0
    draws = sample_truncated_normal(ABOVE_THREE, mu, 1.0, rng, size=reps)
    for y in draws:
        lo, hi = truncated_gaussian_interval(float(y), 1.0, ABOVE_THREE, 0.05)
        covered += lo <= mu <= hi
    assert covered / reps == pytest.approx(0.95, abs=0.02)


def test_leftover_information_limits():
    assert 0.999 <= leftover_information(13.0, 3.0) <= 1.0
    assert leftover_information(-7.0, 3.0) < 0.01
    values = [leftover_information(mu, 3.0) for mu in np.linspace(-10, 10, 41)]
    assert np.all(np.diff(values) >= -1e-12)


def test_leftover_information_is_truncated_variance():
    mu = 2.0
    law = TruncatedGaussian(mu, 1.0, ABOVE_THREE)
    second, _ = integrate.quad(lambda x: (x - law.mean()) ** 2 * norm.pdf(x - mu) / norm.sf(3.0 - mu), 3.0, np.inf)
    assert leftover_information(mu, 3.0) == pytest.approx(second, rel=1e-6)
