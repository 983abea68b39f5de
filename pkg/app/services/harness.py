"""Simulation harness: file-drawer cutoffs, splitting vs carving, long-run error checks.

Replicates run in a process pool. Each replicate draws its stream from
(seed, replicate index), so tables do not depend on worker count or
completion order.
"""

import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from itertools import repeat

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from app.core.config import get_settings
from app.core.exceptions import InvalidConfigurationError, NumericalError, PreconditionError
from app.core.logger import get_module_logger, init_worker_logger
from app.core.rng import base_seed, derive_rng, spawn_seed
from app.schemas.experiments import (
    AggregateConfig,
    AggregateReport,
    CarvingConfig,
    MetricsRow,
    MetricsTable,
    ReplicateResult,
    rate_se,
)
from app.schemas.sampling import ChainConfig
from app.services.lasso import lambda_mc, lasso_fit, lasso_selection_region
from app.services.regions import IntervalUnion
from app.services.regression import RegressionProblem, selected_z_test
from app.services.saturated import classical_z_p_value
from app.services.truncated import TruncatedGaussian, log_gaussian_sf

log = get_module_logger("harness")


# ==================== 文件抽屉 ====================


def file_drawer_cutoff(threshold: float, alpha: float) -> float:
    """c with P(|Y| > c | |Y| > threshold) = α for Y ~ N(0, 1)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    t = max(float(threshold), 0.0)
    target = math.log(alpha) + log_gaussian_sf(t)

    def gap(c: float) -> float:
        return log_gaussian_sf(c) - target

    hi = t + 1.0
    while gap(hi) > 0.0:
        hi = t + 2.0 * (hi - t)
    return float(brentq(gap, t, hi, xtol=1e-12))


def nominal_conditional_error(threshold: float, cutoff: float) -> float:
    """P(|Y| > cutoff | |Y| > threshold) under N(0, 1)."""
    t = max(float(threshold), 0.0)
    if cutoff <= t:
        return 1.0
    return math.exp(log_gaussian_sf(cutoff) - log_gaussian_sf(t))


# ==================== 数据生成 ====================


def simulate_design(n: int, p: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Equicorrelated Gaussian rows, columns scaled to unit length."""
    shared = rng.standard_normal((n, 1))
    X = math.sqrt(1.0 - rho) * rng.standard_normal((n, p)) + math.sqrt(rho) * shared
    return X / np.linalg.norm(X, axis=0)


def simulate_response(config: CarvingConfig, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    beta = np.zeros(config.p)
    beta[: config.sparsity] = config.signal
    if config.error_dist == "student_t":
        noise = rng.standard_t(config.df, size=config.n)
        # unit variance when it exists, so σ keeps its meaning
        if config.df > 2.0:
            noise *= math.sqrt((config.df - 2.0) / config.df)
    else:
        noise = rng.standard_normal(config.n)
    return X @ beta + config.sigma * noise


def _split_p_values(config: CarvingConfig, X: np.ndarray, y: np.ndarray, active: tuple[int, ...]) -> list[float]:
    X2 = X[config.n1 :, list(active)]
    y2 = y[config.n1 :]
    if X2.shape[0] < len(active):
        raise InvalidConfigurationError(
            f"{X2.shape[0]} held-out rows cannot fit {len(active)} selected variables"
        )
    gram_inv = np.linalg.inv(X2.T @ X2)
    beta_hat = gram_inv @ X2.T @ y2
    se = config.sigma * np.sqrt(np.diag(gram_inv))
    return [classical_z_p_value(float(b), 0.0, float(s)) for b, s in zip(beta_hat, se, strict=True)]


def _carve_p_values(
    config: CarvingConfig,
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    active: tuple[int, ...],
    signs: tuple[int, ...],
    rng: np.random.Generator,
) -> list[float]:
    stage = lasso_selection_region(
        X[: config.n1], lam, active, signs if config.condition_on_signs else None
    )
    region = stage.embed(config.n, 0)
    p_values = []
    for j in active:
        problem = RegressionProblem(X=X, y=y, model=active, target=j, sigma=config.sigma)
        chain = ChainConfig(
            burn_in=config.burn_in, thin=config.thin, n_samples=config.n_samples, seed=spawn_seed(rng)
        )
        outcome = selected_z_test(problem, region, config.alpha, chain, with_interval=False)
        p_values.append(outcome.p_value)
    return p_values


def run_replicate(config: CarvingConfig, index: int) -> ReplicateResult:
    """One simulated dataset: select on the first n1 rows, then test the selected variables."""
    rng = derive_rng(index, seed=config.seed)
    X = simulate_design(config.n, config.p, config.rho, rng)
    y = simulate_response(config, X, rng)
    truth = set(range(config.sparsity))
    try:
        X1, y1 = X[: config.n1], y[: config.n1]
        lam = config.lambda_value or lambda_mc(X1, config.sigma, seed=spawn_seed(rng))
        fit = lasso_fit(X1, y1, lam)
        selected = set(fit.active)
        result = ReplicateResult(
            index=index,
            selected=list(fit.active),
            true_selected=len(selected & truth),
            noise_selected=len(selected - truth),
            screened=truth <= selected,
        )
        if not result.screened or not fit.active:
            return result
        if config.mode == "split":
            p_values = _split_p_values(config, X, y, fit.active)
        else:
            p_values = _carve_p_values(config, X, y, lam, fit.active, fit.signs, rng)
    except (NumericalError, PreconditionError) as e:
        log.bind(replicate=index).warning(f"{config.label} failed: {e}")
        return ReplicateResult(index=index, failed=True, error=str(e))

    for j, p_value in zip(fit.active, p_values, strict=True):
        rejected = p_value <= config.alpha
        if j in truth:
            result.true_tests += 1
            result.true_rejections += int(rejected)
        else:
            result.null_tests += 1
            result.null_rejections += int(rejected)
    return result


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return math.nan, math.nan
    if values.size == 1:
        return float(values[0]), math.nan
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def summarize(config: CarvingConfig, results: Sequence[ReplicateResult]) -> MetricsRow:
    """Aggregate replicate results; power and level pool the tests of screened replicates."""
    ok = [r for r in results if not r.failed]
    screened = [r for r in ok if r.screened]
    V = np.array([r.noise_selected for r in ok], dtype=float)
    S = np.array([r.true_selected for r in ok], dtype=float)
    fdp = V / np.maximum(V + S, 1.0)
    p_screen, p_screen_se = rate_se(len(screened), len(ok))
    E_V, E_V_se = _mean_se(V)
    E_S, E_S_se = _mean_se(S)
    fdr, fdr_se = _mean_se(fdp)
    power, power_se = rate_se(sum(r.true_rejections for r in screened), sum(r.true_tests for r in screened))
    level, level_se = rate_se(sum(r.null_rejections for r in screened), sum(r.null_tests for r in screened))
    return MetricsRow(
        label=config.label,
        mode=config.mode,
        n1=config.n1,
        replicates=len(results),
        failures=len(results) - len(ok),
        screened=len(screened),
        p_screen=p_screen,
        p_screen_se=p_screen_se,
        E_V=E_V,
        E_V_se=E_V_se,
        E_RminusV=E_S,
        E_RminusV_se=E_S_se,
        FDR=fdr,
        FDR_se=fdr_se,
        power=power,
        power_se=power_se,
        level=level,
        level_se=level_se,
    )


def _resolve(config: CarvingConfig) -> CarvingConfig:
    settings = get_settings()
    return config.model_copy(
        update={
            "seed": base_seed() if config.seed is None else config.seed,
            "replicates": settings.experiment.replicates if config.replicates is None else config.replicates,
        }
    )


def run_carving_experiment(config: CarvingConfig, threads: int | None = None) -> MetricsTable:
    """Run every replicate of one configuration and return its metrics row."""
    config = _resolve(config)
    threads = get_settings().experiment.threads if threads is None else threads
    indices = range(config.replicates)
    log.info(f"{config.label}: {config.replicates} replicates on {threads} worker(s), seed {config.seed}")
    if threads <= 1:
        results = [run_replicate(config, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=init_worker_logger) as pool:
            results = list(pool.map(run_replicate, repeat(config), indices, chunksize=8))
    row = summarize(config, results)
    if row.failures:
        log.warning(f"{config.label}: {row.failures} of {row.replicates} replicates failed and were excluded")
    return MetricsTable(rows=[row])


def tradeoff_sweep(
    base: CarvingConfig,
    n1_grid: Sequence[int],
    modes: Sequence[str] | None = None,
    threads: int | None = None,
) -> MetricsTable:
    """Screening probability and power as the selection stage grows."""
    if not n1_grid:
        raise InvalidConfigurationError("n1 grid must not be empty")
    rows = []
    for mode in modes or (base.mode,):
        for n1 in n1_grid:
            config = base.model_copy(update={"n1": int(n1), "mode": mode})
            config = CarvingConfig.model_validate(config.model_dump())
            rows.extend(run_carving_experiment(config, threads).rows)
    return MetricsTable(rows=rows)


# ==================== 长程误差检验 ====================


def _effects(config: AggregateConfig, size: int | tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    null = rng.random(size) < config.null_fraction
    return np.where(null, 0.0, config.signal)


def _two_sided_cutoff(alpha: float) -> float:
    return float(norm.isf(alpha / 2.0))


def _discipline(config: AggregateConfig, rng: np.random.Generator) -> AggregateReport:
    mu = _effects(config, config.groups, rng)
    y = mu + rng.standard_normal(config.groups)
    selected = np.abs(y) > config.threshold
    cutoff = file_drawer_cutoff(config.threshold, config.alpha)
    if config.test == "selective":
        reject = np.abs(y) > cutoff
    elif config.test == "nominal":
        reject = np.abs(y) > _two_sided_cutoff(config.alpha)
    else:
        reject = rng.random(config.groups) < config.alpha
    true_null = selected & (mu == 0.0)
    false_rejections = int(np.sum(reject & true_null))
    nulls = int(true_null.sum())
    ratio, se = rate_se(false_rejections, nulls)
    return AggregateReport(
        kind="discipline",
        test=config.test,
        alpha=config.alpha,
        ratio=ratio,
        se=se,
        numerator=false_rejections,
        denominator=nulls,
        extra={
            "selective_cutoff": cutoff,
            "nominal_conditional_error": nominal_conditional_error(
                config.threshold, _two_sided_cutoff(config.alpha)
            ),
            "selected": int(selected.sum()),
        },
    )


def _symmetric_support(threshold: float) -> IntervalUnion:
    return IntervalUnion.merge([(-math.inf, -threshold), (threshold, math.inf)])


def _pivot_rejects(y: float, mu: float, support: IntervalUnion, alpha: float) -> bool:
    law = TruncatedGaussian(mu, 1.0, support)
    return min(1.0, 2.0 * min(law.cdf(y), law.sf(y))) <= alpha


def _fcr(config: AggregateConfig, rng: np.random.Generator) -> AggregateReport:
    """Non-coverage fraction among intervals built for |Y_i| > threshold.

    A selective interval misses μ_i exactly when the pivot test at μ_i rejects.
    """
    experiments = max(1, config.groups // config.per_experiment)
    support = _symmetric_support(config.threshold)
    nominal = _two_sided_cutoff(config.alpha)
    fractions = np.zeros(experiments)
    constructed = 0
    misses = 0
    for e in range(experiments):
        mu = _effects(config, config.per_experiment, rng)
        y = mu + rng.standard_normal(config.per_experiment)
        chosen = np.flatnonzero(np.abs(y) > config.threshold)
        if chosen.size == 0:
            continue
        if config.test == "selective":
            miss = [_pivot_rejects(float(y[i]), float(mu[i]), support, config.alpha) for i in chosen]
        elif config.test == "nominal":
            miss = list(np.abs(y[chosen] - mu[chosen]) > nominal)
        else:
            miss = list(rng.random(chosen.size) < config.alpha)
        fractions[e] = sum(miss) / chosen.size
        constructed += chosen.size
        misses += int(sum(miss))
    ratio, se = _mean_se(fractions)
    return AggregateReport(
        kind="fcr",
        test=config.test,
        alpha=config.alpha,
        ratio=ratio,
        se=se,
        numerator=misses,
        denominator=constructed,
        extra={"experiments": experiments},
    )


def _fwer(config: AggregateConfig, rng: np.random.Generator) -> AggregateReport:
    """Test only the mean with the largest |Y_i|, conditional on it being the largest."""
    experiments = max(1, config.groups // config.per_experiment)
    nominal = _two_sided_cutoff(config.alpha)
    false_rejections = 0
    for _ in range(experiments):
        mu = _effects(config, config.per_experiment, rng)
        y = mu + rng.standard_normal(config.per_experiment)
        order = np.argsort(-np.abs(y))
        winner, runner_up = int(order[0]), float(abs(y[order[1]]))
        if mu[winner] != 0.0:
            continue
        if config.test == "selective":
            rejected = _pivot_rejects(float(y[winner]), 0.0, _symmetric_support(runner_up), config.alpha)
        elif config.test == "nominal":
            rejected = abs(y[winner]) > nominal
        else:
            rejected = rng.random() < config.alpha
        false_rejections += int(rejected)
    ratio, se = rate_se(false_rejections, experiments)
    return AggregateReport(
        kind="fwer",
        test=config.test,
        alpha=config.alpha,
        ratio=ratio,
        se=se,
        numerator=false_rejections,
        denominator=experiments,
        extra={"experiments": experiments},
    )


_CHECKS = {"discipline": _discipline, "fcr": _fcr, "fwer": _fwer}


def aggregate_error_check(kind: str, config: AggregateConfig) -> AggregateReport:
    """Long-run error ratio of selective, nominal or trivial tests across many selections."""
    if kind not in _CHECKS:
        raise InvalidConfigurationError(f"unknown aggregate check {kind!r}; expected one of {sorted(_CHECKS)}")
    rng = derive_rng(list(_CHECKS).index(kind), seed=base_seed() if config.seed is None else config.seed)
    report = _CHECKS[kind](config, rng)
    log.info(f"{kind} check ({config.test}): ratio {report.ratio:.4f} ± {report.se:.4f}")
    return report
