"""Worked examples as data: the price of selection in one and two Gaussian
observations, and the saturated vs selected p-values of a two-variable
regression."""

import math
from typing import Any

import numpy as np
from scipy.stats import norm

from app.core.exceptions import InvalidConfigurationError
from app.core.logger import get_module_logger
from app.core.rng import base_seed, derive_rng
from app.schemas.sampling import ChainConfig
from app.services.expfam import TiltedSampleSet, tilted_variance
from app.services.regions import IntervalUnion, SelectionRegion
from app.services.regression import RegressionProblem, selected_z_test
from app.services.saturated import saturated_z_test
from app.services.truncated import (
    leftover_information,
    log_gaussian_sf,
    sample_truncated_normal,
    truncated_gaussian_interval,
)
from app.services.umpu import enumerated_confidence_interval

log = get_module_logger("harness")

GALLERY = ("ex2", "ex3", "ex4")

SIGNED_EVENT = "y1 > |y2|"
UNSIGNED_EVENT = "|y1| > |y2|"


def univariate_example(threshold: float = 3.0, alpha: float = 0.05) -> dict[str, Any]:
    """Y ~ N(μ, 1) selected when Y > threshold: leftover information and intervals."""
    support = IntervalUnion.merge([(threshold, math.inf)])
    mu_grid = np.linspace(-10.0, 10.0, 81)
    y_grid = np.linspace(threshold + 0.05, threshold + 6.0, 40)
    nominal = float(norm.isf(alpha / 2.0))
    intervals = []
    for y in y_grid:
        lo, hi = truncated_gaussian_interval(float(y), 1.0, support, alpha, "equal_tailed")
        ulo, uhi = truncated_gaussian_interval(float(y), 1.0, support, alpha, "umau")
        intervals.append(
            {
                "y": float(y),
                "selective": [lo, hi],
                "umau": [ulo, uhi],
                "nominal": [float(y) - nominal, float(y) + nominal],
            }
        )
    return {
        "threshold": threshold,
        "alpha": alpha,
        "leftover_information": [
            {"mu": float(mu), "information": leftover_information(float(mu), threshold)} for mu in mu_grid
        ],
        "intervals": intervals,
    }


def carving_law(threshold: float, lo: float, hi: float, spacing: float = 0.02) -> TiltedSampleSet:
    """Quadrature grid for S = Y1 + Y2 given Y1 > threshold, natural parameter μ.

    The density is exp(μs − s²/4)·Φ̄(√2(threshold − s/2)) up to normalization.
    """
    s = np.arange(lo, hi + spacing, spacing)
    log_carrier = -0.25 * s**2 + log_gaussian_sf(math.sqrt(2.0) * (threshold - 0.5 * s))
    return TiltedSampleSet(s, log_carrier, reference_theta=0.0)


def carving_example(
    threshold: float = 3.0,
    alpha: float = 0.05,
    mu_grid: tuple[float, ...] = (-2.0, 0.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0),
    draws: int = 100,
    seed: int | None = None,
) -> dict[str, Any]:
    """Two observations, selection on the first: splitting uses Y2, carving uses Y1 + Y2.

    Reports the Fisher information and the mean equal-tailed interval length
    of each procedure given selection.
    """
    seed = base_seed() if seed is None else seed
    law = carving_law(threshold, -30.0, 2.0 * max(max(mu_grid), threshold) + 15.0)
    split_length = 2.0 * float(norm.isf(alpha / 2.0))
    selected = IntervalUnion.merge([(threshold, math.inf)])
    rows = []
    for index, mu in enumerate(mu_grid):
        rng = derive_rng(index, seed=seed)
        y1 = sample_truncated_normal(selected, mu, 1.0, rng, size=draws)
        y2 = mu + rng.standard_normal(draws)
        lengths = []
        for s in y1 + y2:
            lo, hi = enumerated_confidence_interval(float(s), law, alpha)
            lengths.append(hi - lo)
        carve_length = float(np.mean(lengths))
        rows.append(
            {
                "mu": mu,
                "split_information": 1.0,
                "carve_information": 1.0 + leftover_information(mu, threshold),
                "carve_information_quadrature": tilted_variance(law, mu),
                "split_length": split_length,
                "carve_length": carve_length,
                "carve_length_se": float(np.std(lengths, ddof=1) / math.sqrt(draws)),
                "length_ratio": split_length / carve_length,
            }
        )
    log.info(f"carving example: length ratio at mu={mu_grid[-1]} is {rows[-1]['length_ratio']:.4f}")
    return {"threshold": threshold, "alpha": alpha, "draws": draws, "seed": seed, "rows": rows}


def _larger_coordinate_regions() -> tuple[SelectionRegion, SelectionRegion]:
    """{y1 > |y2|} and {|y1| > |y2|} in the plane."""
    wedge = (np.array([[-1.0, 1.0], [-1.0, -1.0]]), np.zeros(2))
    mirror = (np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
    return SelectionRegion.from_polytopes([wedge]), SelectionRegion.from_polytopes([wedge, mirror])


def regression_example(
    y: tuple[float, float] = (2.9, 2.5),
    alpha: float = 0.05,
    n_samples: int = 20000,
    seed: int | None = None,
) -> dict[str, Any]:
    """X = I₂, the variable with the larger |y_j| is selected and tested for β = 0.

    Each p-value conditions on its own event, named under ``regions``:
    ``p_saturated`` and ``p_selected_sign_free`` on {|y1| > |y2|},
    ``p_saturated_signed`` and ``p_selected`` on {y1 > |y2|}. Same-event
    comparisons pair the saturated and selected values of one region.
    """
    seed = base_seed() if seed is None else seed
    response = np.asarray(y, dtype=float)
    winner = int(np.argmax(np.abs(response)))
    if winner != 0:
        raise InvalidConfigurationError("the first coordinate must be the selected one")
    problem = RegressionProblem(X=np.eye(2), y=response, model=(0,), target=0, sigma=1.0)
    signed, unsigned = _larger_coordinate_regions()
    config = ChainConfig.from_settings(seed=seed, n_samples=n_samples)

    saturated = saturated_z_test(problem, unsigned, alpha, with_interval=False)
    saturated_signed = saturated_z_test(problem, signed, alpha, with_interval=False)
    selected_signed = selected_z_test(problem, signed, alpha, config, with_interval=False)
    selected_unsigned = selected_z_test(problem, unsigned, alpha, config, with_interval=False)
    return {
        "y": list(response),
        "alpha": alpha,
        "p_saturated": saturated.p_value,
        "p_saturated_signed": saturated_signed.p_value,
        "p_selected": selected_signed.p_value,
        "p_selected_sign_free": selected_unsigned.p_value,
        "regions": {
            "p_saturated": UNSIGNED_EVENT,
            "p_saturated_signed": SIGNED_EVENT,
            "p_selected": SIGNED_EVENT,
            "p_selected_sign_free": UNSIGNED_EVENT,
        },
        "ess": selected_signed.diagnostics.ess,
        "seed": seed,
        "n_samples": n_samples,
    }


def example_gallery(which: str, seed: int | None = None) -> dict[str, Any]:
    if which == "ex2":
        return {"example": which, **univariate_example()}
    if which == "ex3":
        return {"example": which, **carving_example(seed=seed)}
    if which == "ex4":
        return {"example": which, **regression_example(seed=seed)}
    raise InvalidConfigurationError(f"unknown example {which!r}; expected one of {GALLERY}")
