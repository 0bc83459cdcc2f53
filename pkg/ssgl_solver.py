"""
Блочный координатный подъем для SSGL с уточненным порогом отбора,
подстановкой E[θ|β] и обновлением σ² с правилом заморозки, а также
лестница λ0 с теплым стартом.

Рядом лежит базовый group lasso (тот же цикл по группам без spike).
"""

import logging
import warnings
from dataclasses import dataclass, field
from math import log, sqrt
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.stats import chi2

from errors import (
    DegenerateVariance,
    DegenerateVarianceWarning,
    DimensionMismatch,
    NonFinite,
    SsglError,
    SsglValidationError,
)
from grouped_design import GroupedDesign
from ssgl_penalty import (
    PenaltyParams,
    lambda_star,
    omega_threshold,
    separable_penalty,
    solver_threshold,
)

logger = logging.getLogger("SSGL")

SIGMA2_FLOOR = 1e-12
DEFAULT_LADDER = tuple(float(v) for v in range(1, 101))


class SsglConfig(BaseModel):
    """Настройки солвера. b=None означает b = G, eps=None означает 1e-6·√p."""

    lambda0_ladder: Tuple[float, ...] = DEFAULT_LADDER
    lambda1: float = Field(default=1.0, gt=0)
    a: float = Field(default=1.0, gt=0)
    b: Optional[float] = Field(default=None, gt=0)
    M: int = Field(default=10, ge=1)
    eps: Optional[float] = Field(default=None, gt=0)
    max_iter: int = Field(default=10_000, ge=1)
    sigma_freeze_iters: int = Field(default=100, ge=1)

    @field_validator("lambda0_ladder")
    @classmethod
    def _ladder(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("lambda0 ladder is empty")
        if any(x <= 0 for x in v):
            raise ValueError("lambda0 ladder values must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("lambda0 ladder must be strictly increasing")
        return v

    @model_validator(mode="after")
    def _slab_below_spike(self) -> "SsglConfig":
        if self.lambda1 > min(self.lambda0_ladder):
            raise ValueError("lambda1 must not exceed min(lambda0 ladder)")
        return self

    def resolve_b(self, G: int) -> float:
        if self.b is not None:
            return self.b
        return float(max(G, 1))

    def resolve_eps(self, p: int) -> float:
        if self.eps is not None:
            return self.eps
        return 1e-6 * sqrt(max(p, 1))


@dataclass
class SsglState:
    """Состояние, передаваемое между шагами лестницы"""

    beta: np.ndarray
    theta: float
    sigma2: float
    delta: np.ndarray
    q_hat: int = 0

    def copy(self) -> "SsglState":
        return SsglState(beta=self.beta.copy(), theta=self.theta, sigma2=self.sigma2,
                         delta=self.delta.copy(), q_hat=self.q_hat)


@dataclass
class SsglFit:
    beta_ortho: np.ndarray
    beta_original: np.ndarray
    intercept: float
    selected_groups: List[str]
    sigma2: float
    theta: float
    iterations: int
    converged: bool
    generalized_dimension: int
    lambda0: float
    state: SsglState
    sigma_updated: bool = True

    @property
    def n_selected(self) -> int:
        return len(self.selected_groups)

    def summary(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_selected": self.n_selected,
            "sigma2": self.sigma2,
            "theta": self.theta,
            "sigma_updated": self.sigma_updated,
        }


@dataclass
class SsglPath:
    """Все решения лестницы; failures хранит (λ0, сообщение) для упавших шагов"""

    fits: List[SsglFit]
    failures: List[Tuple[float, str]] = field(default_factory=list)

    @property
    def final(self) -> SsglFit:
        if not self.fits:
            raise NonFinite("no ladder step produced a fit")
        return self.fits[-1]

    def trace(self) -> pd.DataFrame:
        rows = [f.summary() for f in self.fits]
        rows += [{"lambda0": lam, "error": msg} for lam, msg in self.failures]
        return pd.DataFrame(rows)


# ----------------------
# Helpers
# ----------------------

def _unwrap(design) -> GroupedDesign:
    # PreparedDesign / GamDesign хранят сам план в атрибуте design
    return design.design if hasattr(design, "design") else design


def _original_scale(design, beta: np.ndarray) -> Tuple[np.ndarray, float]:
    if hasattr(design, "original_coefficients"):
        return design.original_coefficients(beta), design.intercept(beta)
    grouped = _unwrap(design)
    return beta.copy(), float(grouped.y_mean - grouped.x_means @ beta)


def _group_params(grouped: GroupedDesign, lambda0: float, lambda1: float,
                  theta: float, sigma2: float) -> List[PenaltyParams]:
    # λ0 масштабируется на √m_g; для непенализованных групп параметры не используются
    return [
        PenaltyParams(lambda0=max(lambda0 * g.scale, lambda1), lambda1=lambda1,
                      theta=theta, sigma2=sigma2, n=grouped.n, m=g.size)
        for g in grouped.groups
    ]


def _thresholds(grouped: GroupedDesign, params: Sequence[PenaltyParams]) -> np.ndarray:
    cache: Dict[int, float] = {}
    out = np.zeros(grouped.n_groups)
    for i, (g, prm) in enumerate(zip(grouped.groups, params)):
        if not g.penalized:
            continue
        if g.size not in cache:
            cache[g.size] = solver_threshold(prm)
        out[i] = cache[g.size]
    return out


def _count_selected(grouped: GroupedDesign, beta: np.ndarray) -> int:
    return sum(1 for g, sl in zip(grouped.groups, grouped.slices)
               if g.penalized and np.any(beta[sl] != 0))


# ----------------------
# Elementary updates
# ----------------------

def partial_residual(design, residual: np.ndarray, beta: np.ndarray, index: int) -> np.ndarray:
    """z_g = X_gᵀ(Y − Σ_{l≠g} X_l β_l) = X_gᵀ r + n·β_g при X_gᵀX_g = n·I"""
    grouped = _unwrap(design)
    sl = grouped.slices[index]
    return grouped.X[:, sl].T @ residual + grouped.n * beta[sl]


def update_group(design, state: SsglState, residual: np.ndarray, index: int,
                 params: PenaltyParams) -> np.ndarray:
    """Обновляет β_g и остаток r на месте; возвращает новое β_g"""
    grouped = _unwrap(design)
    spec = grouped.groups[index]
    sl = grouped.slices[index]
    old = state.beta[sl].copy()
    z = partial_residual(grouped, residual, state.beta, index)
    z_norm = float(np.linalg.norm(z))

    if spec.penalized:
        lam = float(lambda_star(np.linalg.norm(old), params))
        above = z_norm > state.delta[index]
    else:
        lam = params.lambda1
        above = True

    if above and z_norm > 0:
        shrink = max(0.0, 1.0 - state.sigma2 * lam / z_norm)
        new = (shrink / grouped.n) * z
    else:
        new = np.zeros_like(old)

    change = new - old
    if np.any(change != 0):
        residual -= grouped.X[:, sl] @ change
        state.beta[sl] = new
    return new


def update_theta(q_hat: int, a: float, b: float, G: int) -> float:
    """θ = (a + q̂)/(a + b + G)"""
    return (a + q_hat) / (a + b + G)


def update_sigma2(residual: np.ndarray, n: int) -> float:
    """σ² = ‖r‖²/(n + 2), с нижней границей SIGMA2_FLOOR"""
    sigma2 = float(residual @ residual) / (n + 2)
    if not np.isfinite(sigma2):
        raise NonFinite("residual sum of squares is not finite")
    if sigma2 < SIGMA2_FLOOR:
        warnings.warn(f"sigma2={sigma2:.3g} clamped to {SIGMA2_FLOOR:g} (saturated model)",
                      DegenerateVarianceWarning, stacklevel=2)
        return SIGMA2_FLOOR
    return sigma2


def init_sigma2(y: np.ndarray) -> float:
    """Мода Scaled-Inv-χ²(3, τ²), где var(y): 90-й процентиль априорного распределения.

    Из 3τ²/σ² ~ χ²_3 следует τ² = var(y)·χ²_{3;0.10}/3, мода 3τ²/5.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise DegenerateVariance("need at least two responses to initialize sigma2")
    var = float(np.var(y, ddof=1))
    if not var > 0:
        raise DegenerateVariance("response has zero variance, cannot initialize sigma2")
    nu = 3.0
    tau2 = var * float(chi2.ppf(0.10, nu)) / nu
    return nu * tau2 / (nu + 2.0)


# ----------------------
# Single fit / path
# ----------------------

def _cold_state(grouped: GroupedDesign, config: SsglConfig, lambda0: float) -> SsglState:
    sigma2 = init_sigma2(grouped.y)
    params = _group_params(grouped, lambda0, config.lambda1, 0.5, sigma2)
    return SsglState(beta=np.zeros(grouped.p), theta=0.5, sigma2=sigma2,
                     delta=_thresholds(grouped, params), q_hat=0)


def fit_single(design, config: SsglConfig, lambda0: float,
               warm_state: Optional[SsglState] = None, update_sigma: bool = True) -> SsglFit:
    """Один шаг лестницы: циклы по группам до ‖β^(k) − β^(k−1)‖ ≤ eps или max_iter.

    После каждой M-й группы прохода пересчитываются θ, Δ и (если разрешено) σ².
    """
    grouped = _unwrap(design)
    if lambda0 < config.lambda1:
        raise SsglValidationError(f"lambda0={lambda0} is below lambda1={config.lambda1}")
    G = grouped.n_penalized
    b = config.resolve_b(G)
    eps = config.resolve_eps(grouped.p)

    if warm_state is None:
        state = _cold_state(grouped, config, lambda0)
    else:
        if warm_state.beta.shape[0] != grouped.p:
            raise DimensionMismatch(f"warm start has {warm_state.beta.shape[0]} coefficients, design has {grouped.p}")
        state = warm_state.copy()
        if state.delta.shape[0] != grouped.n_groups:
            state.delta = _thresholds(grouped, _group_params(grouped, lambda0, config.lambda1,
                                                             state.theta, state.sigma2))

    residual = grouped.y - grouped.X @ state.beta
    params = _group_params(grouped, lambda0, config.lambda1, state.theta, state.sigma2)

    def refresh(sigma_too: bool) -> None:
        nonlocal params
        state.q_hat = _count_selected(grouped, state.beta)
        state.theta = update_theta(state.q_hat, config.a, b, G)
        if sigma_too:
            state.sigma2 = update_sigma2(residual, grouped.n)
        params = _group_params(grouped, lambda0, config.lambda1, state.theta, state.sigma2)
        state.delta = _thresholds(grouped, params)

    iterations = 0
    converged = False
    while iterations < config.max_iter:
        iterations += 1
        previous = state.beta.copy()
        for index in range(grouped.n_groups):
            update_group(grouped, state, residual, index, params[index])
            # g ≡ 0 (mod M) внутри прохода, g с единицы
            if (index + 1) % config.M == 0:
                refresh(update_sigma)
        if not np.all(np.isfinite(state.beta)):
            raise NonFinite(f"non-finite coefficients at lambda0={lambda0}, sweep {iterations}")
        diff = float(np.linalg.norm(state.beta - previous))
        logger.debug("lambda0=%s sweep=%d diff=%.3e sigma2=%.4g theta=%.4g",
                     lambda0, iterations, diff, state.sigma2, state.theta)
        if diff <= eps:
            converged = True
            break

    # итоговое θ по финальному носителю; σ² не трогаем
    refresh(False)
    if not converged:
        logger.warning("lambda0=%s did not converge in %d sweeps", lambda0, config.max_iter)

    beta = state.beta.copy()
    beta_original, intercept = _original_scale(design, beta)
    norms = grouped.group_norms(beta)
    fit = SsglFit(
        beta_ortho=beta,
        beta_original=beta_original,
        intercept=intercept,
        selected_groups=[gid for gid, nrm in zip(grouped.group_ids, norms) if nrm > 0],
        sigma2=state.sigma2,
        theta=state.theta,
        iterations=iterations,
        converged=converged,
        generalized_dimension=0,
        lambda0=float(lambda0),
        state=state,
        sigma_updated=update_sigma,
    )
    fit.generalized_dimension = generalized_dimensionality(fit, grouped, config)
    return fit


def fit_path(design, config: SsglConfig) -> SsglPath:
    """Проходит лестницу λ0 с теплым стартом.

    σ² заморожена на первом шаге и размораживается навсегда, как только
    предыдущий шаг сошелся быстрее sigma_freeze_iters итераций.
    """
    fits: List[SsglFit] = []
    failures: List[Tuple[float, str]] = []
    state: Optional[SsglState] = None
    sigma_free = False
    for lambda0 in config.lambda0_ladder:
        try:
            fit = fit_single(design, config, lambda0, warm_state=state, update_sigma=sigma_free)
        except SsglError as e:
            logger.warning("lambda0=%s failed: %s", lambda0, e)
            failures.append((float(lambda0), str(e)))
            continue
        fits.append(fit)
        state = fit.state
        if not sigma_free and fit.converged and fit.iterations < config.sigma_freeze_iters:
            sigma_free = True
            logger.info("sigma2 unfrozen after lambda0=%s (%d sweeps)", lambda0, fit.iterations)
        logger.info("lambda0=%s: %d groups selected, sigma2=%.4g, theta=%.4g",
                    lambda0, fit.n_selected, fit.sigma2, fit.theta)
    return SsglPath(fits=fits, failures=failures)


# ----------------------
# Diagnostics
# ----------------------

def generalized_dimensionality(fit: SsglFit, design, config: SsglConfig) -> int:
    """#{g : ‖β_g‖ > ω_g}; непенализованные группы учитываются при ненулевой норме"""
    grouped = _unwrap(design)
    norms = grouped.group_norms(fit.beta_ortho)
    count = 0
    for spec, nrm in zip(grouped.groups, norms):
        if not spec.penalized:
            count += int(nrm > 0)
            continue
        lam0 = fit.lambda0 * spec.scale
        if lam0 <= config.lambda1:
            count += int(nrm > 0)
            continue
        prm = PenaltyParams(lambda0=lam0, lambda1=config.lambda1, theta=fit.theta,
                            sigma2=fit.sigma2, n=grouped.n, m=spec.size)
        count += int(nrm > omega_threshold(prm))
    return count


def log_posterior(design, beta: np.ndarray, sigma2: float, theta: float,
                  lambda0: float, lambda1: float = 1.0) -> float:
    """−‖Y − Xβ‖²/(2σ²) − (n+2)·log σ + pen_S(β | θ)"""
    grouped = _unwrap(design)
    resid = grouped.y - grouped.X @ beta
    value = -float(resid @ resid) / (2.0 * sigma2) - 0.5 * (grouped.n + 2) * log(sigma2)
    for spec, sl in zip(grouped.groups, grouped.slices):
        nrm = float(np.linalg.norm(beta[sl]))
        if not spec.penalized:
            value -= lambda1 * nrm
            continue
        prm = PenaltyParams(lambda0=max(lambda0 * spec.scale, lambda1), lambda1=lambda1,
                            theta=theta, sigma2=sigma2, n=grouped.n, m=spec.size)
        value += separable_penalty(nrm, prm)
    return value


def kkt_report(fit: SsglFit, design, config: SsglConfig) -> pd.DataFrame:
    """Проверка неподвижной точки в финальных (θ̂, σ̂²).

    Для выбранных групп: относительная невязка ‖z − (n + σ²λ*/‖β‖)β‖/‖z‖.
    Для нулевых: ‖z‖ минус эффективный порог max(Δ, σ²λ*(0)).
    """
    grouped = _unwrap(design)
    beta = fit.beta_ortho
    residual = grouped.y - grouped.X @ beta
    params = _group_params(grouped, fit.lambda0, config.lambda1, fit.theta, fit.sigma2)
    deltas = _thresholds(grouped, params)
    rows = []
    for index, (spec, sl) in enumerate(zip(grouped.groups, grouped.slices)):
        z = partial_residual(grouped, residual, beta, index)
        z_norm = float(np.linalg.norm(z))
        b_norm = float(np.linalg.norm(beta[sl]))
        prm = params[index]
        if b_norm > 0:
            lam = float(lambda_star(b_norm, prm)) if spec.penalized else config.lambda1
            gap = z - (grouped.n + fit.sigma2 * lam / b_norm) * beta[sl]
            violation = float(np.linalg.norm(gap)) / max(z_norm, np.finfo(float).tiny)
            cutoff = float("nan")
        else:
            lam0 = float(lambda_star(0.0, prm)) if spec.penalized else config.lambda1
            cutoff = max(float(deltas[index]), fit.sigma2 * lam0)
            violation = z_norm - cutoff
        rows.append({"group": spec.id, "selected": b_norm > 0, "z_norm": z_norm,
                     "cutoff": cutoff, "violation": violation})
    return pd.DataFrame(rows)


# ----------------------
# Group lasso baseline
# ----------------------

@dataclass
class GroupLassoFit:
    beta_ortho: np.ndarray
    beta_original: np.ndarray
    intercept: float
    selected_groups: List[str]
    lam: float
    iterations: int
    converged: bool

    @property
    def n_selected(self) -> int:
        return len(self.selected_groups)


def fit_group_lasso(design, lam: float, warm_beta: Optional[np.ndarray] = None,
                    eps: Optional[float] = None, max_iter: int = 10_000) -> GroupLassoFit:
    """Минимизирует ½‖Y − Xβ‖² + nλ Σ_g √m_g ‖β_g‖ блочным спуском"""
    grouped = _unwrap(design)
    n = grouped.n
    tol = eps if eps is not None else 1e-6 * sqrt(max(grouped.p, 1))
    beta = np.zeros(grouped.p) if warm_beta is None else np.asarray(warm_beta, dtype=float).copy()
    residual = grouped.y - grouped.X @ beta
    slices = grouped.slices
    iterations, converged = 0, False
    while iterations < max_iter:
        iterations += 1
        previous = beta.copy()
        for spec, sl in zip(grouped.groups, slices):
            z = grouped.X[:, sl].T @ residual + n * beta[sl]
            if spec.penalized:
                z_norm = float(np.linalg.norm(z))
                shrink = max(0.0, 1.0 - n * lam * spec.scale / z_norm) if z_norm > 0 else 0.0
                new = (shrink / n) * z
            else:
                new = z / n
            change = new - beta[sl]
            if np.any(change != 0):
                residual -= grouped.X[:, sl] @ change
                beta[sl] = new
        if np.linalg.norm(beta - previous) <= tol:
            converged = True
            break
    if not converged:
        logger.warning("group lasso lambda=%.4g did not converge in %d sweeps", lam, max_iter)
    beta_original, intercept = _original_scale(design, beta)
    norms = grouped.group_norms(beta)
    return GroupLassoFit(
        beta_ortho=beta, beta_original=beta_original, intercept=intercept,
        selected_groups=[gid for gid, nrm in zip(grouped.group_ids, norms) if nrm > 0],
        lam=float(lam), iterations=iterations, converged=converged,
    )


def group_lasso_grid(design, n_lambda: int = 50, ratio: float = 1e-2) -> List[float]:
    """Геометрическая сетка от ratio·λ_max до λ_max, по возрастанию"""
    grouped = _unwrap(design)
    lam_max = 0.0
    for spec, sl in zip(grouped.groups, grouped.slices):
        if spec.penalized:
            score = np.linalg.norm(grouped.X[:, sl].T @ grouped.y) / (grouped.n * spec.scale)
            lam_max = max(lam_max, float(score))
    if lam_max <= 0:
        lam_max = 1.0
    return np.geomspace(ratio * lam_max, lam_max, n_lambda).tolist()


def fit_group_lasso_path(design, grid: Sequence[float]) -> List[GroupLassoFit]:
    """Путь с теплым стартом; идет от большого λ к малому, возвращает в порядке grid"""
    order = sorted(range(len(grid)), key=lambda i: -grid[i])
    fits: Dict[int, GroupLassoFit] = {}
    beta = None
    for i in order:
        fit = fit_group_lasso(design, grid[i], warm_beta=beta)
        fits[i] = fit
        beta = fit.beta_ortho
    return [fits[i] for i in range(len(grid))]
