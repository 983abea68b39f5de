import math

import numpy as np
import pytest
from scipy.stats import norm

from app.core.exceptions import InvalidConfigurationError
from app.schemas.experiments import CURVE_COLUMNS, AggregateConfig, CarvingConfig, ReplicateResult
from app.services.harness import (
    aggregate_error_check,
    file_drawer_cutoff,
    nominal_conditional_error,
    run_carving_experiment,
    simulate_design,
    simulate_response,
    summarize,
    tradeoff_sweep,
)

SPLIT = CarvingConfig(n=40, p=10, sparsity=2, signal=7.0, n1=20, mode="split", replicates=5, seed=1)


def test_file_drawer_cutoff():
    c = file_drawer_cutoff(1.0, 0.05)
    assert c == pytest.approx(2.41, abs=0.005)
    assert norm.sf(c) / norm.sf(1.0) == pytest.approx(0.05, rel=1e-8)
    assert file_drawer_cutoff(0.0, 0.05) == pytest.approx(norm.isf(0.025), abs=1e-9)
    with pytest.raises(InvalidConfigurationError):
        file_drawer_cutoff(1.0, 1.5)


def test_nominal_conditional_error():
    assert nominal_conditional_error(1.0, norm.isf(0.025)) == pytest.approx(0.1576, abs=5e-4)
    assert nominal_conditional_error(3.0, 2.0) == 1.0


def test_simulated_design_has_unit_columns(rng):
    X = simulate_design(30, 6, 0.3, rng)
    assert X.shape == (30, 6)
    np.testing.assert_allclose(np.linalg.norm(X, axis=0), 1.0)
    heavy = SPLIT.model_copy(update={"error_dist": "student_t", "df": 3.0})
    y = simulate_response(heavy, simulate_design(40, 10, 0.0, rng), rng)
    assert y.shape == (40,) and np.all(np.isfinite(y))


def test_carving_config_validation():
    with pytest.raises(ValueError):
        CarvingConfig(n=10, n1=20)
    with pytest.raises(ValueError):
        CarvingConfig(p=3, sparsity=5)
    assert SPLIT.label == "Split_20"


def test_summarize_by_hand():
    results = [
        ReplicateResult(
            index=0,
            selected=[0, 1, 5],
            true_selected=2,
            noise_selected=1,
            screened=True,
            true_tests=2,
            true_rejections=2,
            null_tests=1,
            null_rejections=0,
        ),
        ReplicateResult(index=1, selected=[0], true_selected=1),
        ReplicateResult(index=2, failed=True, error="boom"),
    ]
    row = summarize(SPLIT, results)
    assert (row.replicates, row.failures, row.screened) == (3, 1, 1)
    assert row.p_screen == pytest.approx(0.5)
    assert row.E_V == pytest.approx(0.5)
    assert row.E_RminusV == pytest.approx(1.5)
    assert row.E_R == pytest.approx(2.0)
    assert row.FDR == pytest.approx(1 / 6)
    assert row.power == 1.0
    assert row.level == 0.0


def test_split_experiment_is_reproducible():
    first = run_carving_experiment(SPLIT, threads=1)
    second = run_carving_experiment(SPLIT, threads=1)
    assert first.to_frame().equals(second.to_frame())
    row = first.row("Split_20")
    assert row.replicates == 5
    assert 0.0 <= row.p_screen <= 1.0
    assert list(first.curve_frame().columns) == list(CURVE_COLUMNS)
    with pytest.raises(KeyError):
        first.row("Carve_20")


def test_small_carving_run():
    config = CarvingConfig(
        n=30, p=5, sparsity=1, signal=8.0, n1=20, mode="carve", replicates=2, seed=3,
        burn_in=50, thin=1, n_samples=200,
    )
    table = run_carving_experiment(config, threads=1)
    row = table.row("Carve_20")
    assert row.replicates == 2
    assert row.failures == 0


def test_tradeoff_sweep_rows():
    table = tradeoff_sweep(SPLIT.model_copy(update={"replicates": 3}), [20, 25], modes=["split"], threads=1)
    assert [r.label for r in table.rows] == ["Split_20", "Split_25"]
    with pytest.raises(InvalidConfigurationError):
        tradeoff_sweep(SPLIT, [])


def test_discipline_wide_error():
    base = AggregateConfig(groups=200_000, threshold=1.0, seed=2)
    selective = aggregate_error_check("discipline", base)
    assert selective.ratio == pytest.approx(0.05, abs=3 * selective.se)
    assert selective.extra["selective_cutoff"] == pytest.approx(2.41, abs=0.005)
    nominal = aggregate_error_check("discipline", base.model_copy(update={"test": "nominal"}))
    assert nominal.ratio == pytest.approx(0.1576, abs=3 * nominal.se)
    trivial = aggregate_error_check("discipline", base.model_copy(update={"test": "trivial"}))
    assert trivial.ratio == pytest.approx(0.05, abs=3 * trivial.se)


def test_false_coverage_rate():
    base = AggregateConfig(groups=20_000, per_experiment=10, threshold=1.0, seed=4)
    selective = aggregate_error_check("fcr", base)
    assert selective.ratio <= 0.05 + 3 * selective.se
    nominal = aggregate_error_check("fcr", base.model_copy(update={"test": "nominal"}))
    assert nominal.ratio > 0.1


def test_familywise_error_of_the_winner():
    base = AggregateConfig(groups=20_000, per_experiment=10, seed=5)
    selective = aggregate_error_check("fwer", base)
    assert selective.ratio == pytest.approx(0.05, abs=3 * selective.se)
    nominal = aggregate_error_check("fwer", base.model_copy(update={"test": "nominal"}))
    assert nominal.ratio > 0.3
    assert nominal.extra["experiments"] == 2000


def test_unknown_aggregate_kind():
    with pytest.raises(InvalidConfigurationError):
        aggregate_error_check("fdr", AggregateConfig(groups=10))


def test_aggregate_is_seeded():
    config = AggregateConfig(groups=5000, seed=9)
    assert aggregate_error_check("discipline", config) == aggregate_error_check("discipline", config)
    assert not math.isnan(aggregate_error_check("discipline", config).ratio)


@pytest.mark.slow
def test_worker_count_does_not_change_results():
    config = SPLIT.model_copy(update={"replicates": 20})
    serial = run_carving_experiment(config, threads=1)
    pooled = run_carving_experiment(config, threads=2)
    assert serial.to_frame().equals(pooled.to_frame())


def test_student_t_noise_has_unit_variance(rng):
    config = CarvingConfig(n=200_000, p=1, sparsity=0, n1=10, error_dist="student_t", df=5.0)
    noise = simulate_response(config, np.zeros((config.n, 1)), rng)
    assert noise.var() == pytest.approx(1.0, abs=0.04)
    scaled = simulate_response(config.model_copy(update={"sigma": 2.0}), np.zeros((config.n, 1)), rng)
    assert scaled.var() == pytest.approx(4.0, abs=0.16)


# ==================== 拆分与雕刻对比 ====================


def _within(value: float, lo: float, hi: float, se: float) -> bool:
    slack = 3.0 * (se if math.isfinite(se) else 0.0)
    return lo - slack <= value <= hi + slack


@pytest.fixture(scope="module")
def carving_table():
    base = CarvingConfig(replicates=200, seed=2024)
    sweep = tradeoff_sweep(base, [50, 75], modes=["split", "carve"], threads=4)
    full = run_carving_experiment(base, threads=4)
    return {row.label: row for row in sweep.rows + full.rows}


@pytest.fixture(scope="module")
def heavy_tailed_table():
    base = CarvingConfig(replicates=200, seed=2025, error_dist="student_t", df=5.0)
    sweep = tradeoff_sweep(base, [50], modes=["split", "carve"], threads=4)
    full = run_carving_experiment(base, threads=4)
    return {row.label: row for row in sweep.rows + full.rows}


def _check_bands(rows) -> None:
    carve = rows["Carve_100"]
    assert _within(carve.p_screen, 0.96, 1.0, carve.p_screen_se)
    assert _within(carve.power, 0.75, 0.85, carve.power_se)
    assert _within(rows["Split_50"].power, 0.89, 0.97, rows["Split_50"].power_se)
    assert _within(rows["Carve_50"].power, 0.96, 1.0, rows["Carve_50"].power_se)
    for label, row in rows.items():
        assert row.failures <= 0.05 * row.replicates, label
        if math.isfinite(row.level):
            assert row.level <= 0.08 + 3.0 * row.level_se, label


@pytest.mark.slow
def test_carving_matches_reference_bands(carving_table):
    _check_bands(carving_table)


@pytest.mark.slow
def test_carving_dominates_splitting_at_equal_n1(carving_table):
    for n1 in (50, 75):
        split, carve = carving_table[f"Split_{n1}"], carving_table[f"Carve_{n1}"]
        # same datasets, same first-stage selection
        if split.failures == carve.failures == 0:
            assert split.p_screen == carve.p_screen
        assert carve.power >= split.power
    split, carve = carving_table["Split_75"], carving_table["Carve_75"]
    assert carve.power - split.power >= 3.0 * math.hypot(split.power_se, carve.power_se)


@pytest.mark.slow
def test_carving_is_robust_to_heavy_tails(heavy_tailed_table):
    _check_bands(heavy_tailed_table)
