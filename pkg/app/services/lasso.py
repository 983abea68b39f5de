"""Lasso fitting, selection polytopes and post-lasso inference.

Objective convention: ‖y − Xβ‖² + λ‖β‖₁ (no ½). Every KKT constant below
therefore carries an explicit factor 2: 2X_jᵀ(y − Xβ̂) = λ·sign(β̂_j) on the
active set and |2X_jᵀ(y − Xβ̂)| ≤ λ off it. The selection polytope is written
with λ' = λ/2.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import (
    InvalidConfigurationError,
    LassoConvergenceError,
    NumericalError,
    PreconditionError,
)
from app.core.logger import get_module_logger
from app.core.rng import base_seed
from app.schemas.experiments import LassoInferenceReport, VariableInference
from app.schemas.sampling import ChainConfig
from app.services.regions import Polytope, SelectionRegion
from app.services.regression import RegressionProblem, check_full_rank, selected_t_test, selected_z_test

log = get_module_logger("lasso")


@dataclass(frozen=True)
class LassoFit:
    beta_hat: np.ndarray
    active: tuple[int, ...]
    signs: tuple[int, ...]
    lam: float
    kkt_residual: float
    sweeps: int = 0


def soft_threshold(c: float, t: float) -> float:
    """S(c, t); |c| ≤ t maps to exactly zero."""
    if c > t:
        return c - t
    if c < -t:
        return c + t
    return 0.0


def kkt_residual(X: np.ndarray, y: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Largest violation of the stationarity conditions for ‖y − Xβ‖² + λ‖β‖₁."""
    grad = 2.0 * X.T @ (y - X @ beta)
    active = beta != 0
    on = np.abs(grad[active] - lam * np.sign(beta[active]))
    off = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return float(max(on.max(initial=0.0), off.max(initial=0.0)))


def _polish(X: np.ndarray, y: np.ndarray, beta: np.ndarray, lam: float) -> np.ndarray | None:
    """Closed-form solution on the current active set and signs, if it stays consistent."""
    active = np.flatnonzero(beta)
    if active.size == 0 or active.size > X.shape[0]:
        return None
    X_E = X[:, active]
    signs = np.sign(beta[active])
    try:
        solved = np.linalg.solve(X_E.T @ X_E, X_E.T @ y - 0.5 * lam * signs)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(solved) != signs):
        return None
    polished = np.zeros_like(beta)
    polished[active] = solved
    return polished


def lasso_fit(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float | None = None,
    max_iter: int | None = None,
) -> LassoFit:
    """Cyclic coordinate descent in ascending column order until the KKT residual ≤ tol.

    Sweeps alternate between the full column set and the current active set.
    """
    settings = get_settings().lasso
    tol = settings.tol if tol is None else tol
    max_iter = settings.max_iter if max_iter is None else max_iter
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if not lam > 0:
        raise InvalidConfigurationError(f"lambda must be positive, got {lam}")
    col_sq = np.einsum("ij,ij->j", X, X)
    if np.any(col_sq == 0):
        raise InvalidConfigurationError(f"columns {np.flatnonzero(col_sq == 0).tolist()} are identically zero")

    half = 0.5 * lam
    beta = np.zeros(X.shape[1])
    residual = y.copy()
    last = np.inf
    for sweep in range(1, max_iter + 1):
        full = sweep % 2 == 1 or not np.any(beta)
        columns = range(X.shape[1]) if full else np.flatnonzero(beta)
        for j in columns:
            old = beta[j]
            c = float(X[:, j] @ residual) + col_sq[j] * old
            new = soft_threshold(c, half) / col_sq[j]
            if new != old:
                residual -= (new - old) * X[:, j]
                beta[j] = new
        if full:
            polished = _polish(X, y, beta, lam)
            if polished is not None and kkt_residual(X, y, polished, lam) <= tol:
                beta = polished
            last = kkt_residual(X, y, beta, lam)
            if last <= tol:
                break
    else:
        raise LassoConvergenceError(
            f"coordinate descent did not reach KKT residual {tol:.1e} in {max_iter} sweeps", residual=last
        )

    active = tuple(int(j) for j in np.flatnonzero(beta))
    signs = tuple(int(np.sign(beta[j])) for j in active)
    return LassoFit(beta, active, signs, float(lam), last, sweep)


# ==================== 选择区域 ====================


def _sign_polytope(X: np.ndarray, lam: float, active: tuple[int, ...], signs: np.ndarray) -> Polytope:
    half = 0.5 * lam
    n, p = X.shape
    inactive = [k for k in range(p) if k not in active]
    X_E = X[:, list(active)]
    gram_inv = np.linalg.inv(X_E.T @ X_E)
    pinv = gram_inv @ X_E.T
    # β̂_E = X_E⁺y − λ'(X_EᵀX_E)⁻¹s must carry the signs s
    A1 = -signs[:, None] * pinv
    b1 = -half * signs * (gram_inv @ signs)
    if not inactive:
        return Polytope(A1, b1)
    X_N = X[:, inactive]
    resid_op = X_N.T @ (np.eye(n) - X_E @ pinv)
    w = X_N.T @ X_E @ gram_inv @ signs
    # |2X_Nᵀ(y − X_E β̂_E)| ≤ λ on the inactive block
    A0 = np.vstack([resid_op, -resid_op])
    b0 = half * np.concatenate([1.0 - w, 1.0 + w])
    return Polytope(np.vstack([A0, A1]), np.concatenate([b0, b1]))


def lasso_selection_region(
    X: np.ndarray,
    lam: float,
    active: tuple[int, ...],
    signs: tuple[int, ...] | None = None,
) -> SelectionRegion:
    """{y : the lasso at λ selects ``active`` (with ``signs`` when given)}.

    Without signs the region is the union over all 2^|active| sign patterns.
    An empty active set gives the box |Xᵀy| ≤ λ/2.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not lam > 0:
        raise InvalidConfigurationError(f"lambda must be positive, got {lam}")
    active = tuple(int(k) for k in active)
    if not active:
        half = 0.5 * lam
        return SelectionRegion((Polytope(np.vstack([X.T, -X.T]), np.full(2 * X.shape[1], half)),))
    check_full_rank(X[:, list(active)], active)
    if signs is not None:
        if len(signs) != len(active):
            raise InvalidConfigurationError(f"{len(signs)} signs for {len(active)} active variables")
        return SelectionRegion((_sign_polytope(X, lam, active, np.asarray(signs, dtype=float)),))

    cap = get_settings().lasso.max_sign_patterns_active
    if len(active) > cap:
        raise InvalidConfigurationError(
            f"sign-free conditioning on {len(active)} active variables exceeds the cap of {cap}"
        )
    parts = tuple(
        _sign_polytope(X, lam, active, np.array(pattern, dtype=float))
        for pattern in itertools.product((-1.0, 1.0), repeat=len(active))
    )
    return SelectionRegion(parts)


def lambda_mc(X: np.ndarray, sigma: float, n_mc: int | None = None, seed: int | None = None) -> float:
    """λ = 2·E‖Xᵀε‖_∞ with ε ~ N(0, σ²I), averaged over ``n_mc`` draws."""
    if not sigma > 0:
        raise InvalidConfigurationError(f"sigma must be positive, got {sigma}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_mc = get_settings().lasso.lambda_mc_draws if n_mc is None else n_mc
    rng = np.random.default_rng(base_seed() if seed is None else seed)
    noise = rng.standard_normal((n_mc, X.shape[0]))
    return float(sigma * 2.0 * np.mean(np.max(np.abs(noise @ X), axis=1)))


# ==================== lasso 后推断 ====================


def lasso_infer(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    alpha: float,
    sigma: float | None = None,
    condition_on_signs: bool = True,
    method: str = "equal_tailed",
    config: ChainConfig | None = None,
    with_interval: bool = True,
) -> LassoInferenceReport:
    """Selected-model test of β_j = 0 for every active variable.

    Known ``sigma`` gives z-tests, unknown gives t-tests. An empty active set
    yields a report with no question selected.
    """
    fit = lasso_fit(X, y, lam)
    report = LassoInferenceReport(
        lam=fit.lam,
        active=list(fit.active),
        signs=list(fit.signs),
        condition_on_signs=condition_on_signs,
        kkt_residual=fit.kkt_residual,
    )
    if not fit.active:
        log.info(f"lasso at lambda={lam:.4g} selected no variables; no question to test")
        return report

    region = lasso_selection_region(X, lam, fit.active, fit.signs if condition_on_signs else None)
    for j, sign in zip(fit.active, fit.signs, strict=True):
        problem = RegressionProblem(X=X, y=y, model=fit.active, target=j, sigma=sigma, method=method)
        try:
            if sigma is None:
                outcome = selected_t_test(problem, region, alpha, config, with_interval)
            else:
                outcome = selected_z_test(problem, region, alpha, config, with_interval)
            report.results.append(VariableInference(variable=j, sign=sign, outcome=outcome))
        except (NumericalError, PreconditionError) as e:
            log.warning(f"inference for variable {j} failed: {e}")
            report.results.append(VariableInference(variable=j, sign=sign, error=str(e)))
    return report
