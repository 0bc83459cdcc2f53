"""
Чистые функции штрафа spike-and-slab group lasso: плотности, веса смеси p*,
адаптивная регуляризация λ*, пороги отбора Δ и порог ω_g.

Все отношения плотностей считаются в лог-шкале: λ0^m переполняет double
уже при умеренных размерах групп.
"""

import logging
from dataclasses import dataclass
from math import lgamma, log, pi, sqrt
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit

from errors import NonFinite, SsglValidationError

logger = logging.getLogger("SSGL")


@dataclass(frozen=True)
class PenaltyParams:
    """Гиперпараметры одной группы. lambda0 уже умножена на √m_g."""

    lambda0: float
    lambda1: float
    theta: float
    sigma2: float
    n: int
    m: int = 1

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda0 > 0):
            raise SsglValidationError("lambda0 and lambda1 must be positive")
        if self.lambda0 < self.lambda1:
            raise SsglValidationError(f"lambda0={self.lambda0} must be >= lambda1={self.lambda1}")
        if not 0.0 < self.theta < 1.0:
            raise SsglValidationError(f"theta={self.theta} must lie in (0, 1)")
        if not self.sigma2 > 0:
            raise SsglValidationError("sigma2 must be positive")
        if self.n < 1 or self.m < 1:
            raise SsglValidationError("n and m must be >= 1")


def log_normalizer(m: int) -> float:
    """log C_g, C_g = 2^{-m} π^{-(m-1)/2} / Γ((m+1)/2)"""
    return -m * log(2.0) - 0.5 * (m - 1) * log(pi) - lgamma(0.5 * (m + 1))


def group_lasso_log_density(norm, lam: float, m: int):
    """log Ψ(β_g | λ) = log C_g + m·log λ − λ‖β_g‖₂"""
    return log_normalizer(m) + m * log(lam) - lam * np.asarray(norm, dtype=float)


def _slab_log_odds(norm, params: PenaltyParams):
    # log[θΨ1 / ((1−θ)Ψ0)]; нормировочные константы сокращаются
    norm = np.asarray(norm, dtype=float)
    return (log(params.theta) - log1m(params.theta)
            + params.m * (log(params.lambda1) - log(params.lambda0))
            + (params.lambda0 - params.lambda1) * norm)


def log1m(x: float) -> float:
    return float(np.log1p(-x))


def p_star(norm, params: PenaltyParams):
    """Условная вероятность того, что группа пришла из slab"""
    out = expit(_slab_log_odds(norm, params))
    return float(out) if np.ndim(out) == 0 else out


def log_p_star(norm, params: PenaltyParams):
    # log σ(x) = −log(1 + e^{−x})
    out = -np.logaddexp(0.0, -_slab_log_odds(norm, params))
    return float(out) if np.ndim(out) == 0 else out


def lambda_star(norm, params: PenaltyParams):
    """λ* = λ1·p* + λ0·(1 − p*), лежит в [λ1, λ0]"""
    w = p_star(norm, params)
    out = params.lambda1 * w + params.lambda0 * (1.0 - w)
    return np.clip(out, params.lambda1, params.lambda0)


def h_at_zero(params: PenaltyParams) -> float:
    """Знак h(0) выбирает порог в алгоритме: Δᵁ при h(0) > 0"""
    first = (float(lambda_star(0.0, params)) - params.lambda1) ** 2
    return first + (2.0 * params.n / params.sigma2) * log_p_star(0.0, params)


def delta_upper(params: PenaltyParams) -> float:
    """Δᵁ = √(2nσ²·log(1/p*(0))) + σ²λ1"""
    neg_log = max(0.0, -log_p_star(0.0, params))
    return sqrt(2.0 * params.n * params.sigma2 * neg_log) + params.sigma2 * params.lambda1


def d_supremum(params: PenaltyParams) -> float:
    """Верхняя граница допустимого d в нижней оценке порога"""
    sigma = sqrt(params.sigma2)
    gap = params.lambda0 - params.lambda1
    if gap <= 0:
        return 0.0
    inner = params.n / (params.sigma2 * gap) - sqrt(2.0 * params.n) / sigma
    return 2.0 * params.n / params.sigma2 - inner ** 2


def delta_lower(params: PenaltyParams, d: Optional[float] = None) -> float:
    """Δᴸ = √(2nσ²·log(1/p*(0)) − σ⁴d) + σ²λ1; по умолчанию d на супремуме диапазона"""
    if d is None:
        d = max(0.0, d_supremum(params))
    neg_log = max(0.0, -log_p_star(0.0, params))
    radicand = 2.0 * params.n * params.sigma2 * neg_log - params.sigma2 ** 2 * d
    return sqrt(max(0.0, radicand)) + params.sigma2 * params.lambda1


def solver_threshold(params: PenaltyParams) -> float:
    """Порог, который применяет алгоритм: Δᵁ при h(0) > 0, иначе σ²λ*(0)"""
    if h_at_zero(params) > 0:
        return delta_upper(params)
    return params.sigma2 * float(lambda_star(0.0, params))


def separable_penalty(norm, params: PenaltyParams):
    """pen_S для одной группы: −λ1‖β_g‖ + log p*(0) − log p*(β_g); равен 0 в нуле"""
    norm = np.asarray(norm, dtype=float)
    out = -params.lambda1 * norm + log_p_star(0.0, params) - log_p_star(norm, params)
    return float(out) if np.ndim(out) == 0 else out


def threshold_oracle(params: PenaltyParams, grid_size: int = 4000) -> float:
    """Точный порог Δ = inf_{t>0} { n·t/2 − σ²·pen_S(t)/t }.

    Считается численно: логарифмическая сетка на (1e-8, 10·Δᵁ/n], затем
    золотое сечение вокруг лучшего узла. Только для тестов, не для солвера.
    """
    lo, hi = 1e-8, 10.0 * delta_upper(params) / params.n

    def objective(t: float) -> float:
        value = 0.5 * params.n * t - params.sigma2 * separable_penalty(t, params) / t
        if not np.isfinite(value):
            raise NonFinite(f"threshold objective is not finite at t={t}")
        return float(value)

    grid = np.geomspace(lo, hi, grid_size)
    values = np.array([objective(t) for t in grid])
    best = int(np.argmin(values))
    if best == 0 or best == grid_size - 1:
        return float(values[best])
    bracket = (grid[best - 1], grid[best], grid[best + 1])
    try:
        res = optimize.minimize_scalar(objective, bracket=bracket, method="golden",
                                       options={"xtol": 1e-10})
    except ValueError:
        # вырожденная скобка на плоском участке
        return float(values[best])
    return float(min(res.fun, values[best]))


def omega_threshold(params: PenaltyParams) -> float:
    """ω_g = log[((1−θ)/θ)·(λ0/λ1)^m] / (λ0 − λ1): пересечение spike и slab"""
    gap = params.lambda0 - params.lambda1
    if gap <= 0:
        raise SsglValidationError("omega threshold requires lambda0 > lambda1")
    odds = log1m(params.theta) - log(params.theta)
    return (odds + params.m * (log(params.lambda0) - log(params.lambda1))) / gap


# ----------------------
# θ posterior (fully Bayes)
# ----------------------

def theta_closed_form(q_hat: int, a: float, b: float, G: int) -> float:
    """E[θ | β] при λ0 → ∞: (a + q̂) / (a + b + G)"""
    return (a + q_hat) / (a + b + G)


def theta_posterior_mean_quadrature(norms: Sequence[float], lambda0: float, lambda1: float,
                                    a: float, b: float, G: int, m: int = 1) -> float:
    """E[θ | β] как отношение интегралов по апостериорной плотности θ (проверка закрытой формы).

    norms: нормы ненулевых групп; остальные G − q̂ групп нулевые.
    """
    norms = np.asarray(norms, dtype=float)
    q_hat = norms.size
    # log(Ψ1/Ψ0) для каждой ненулевой группы и для нулевой
    log_ratio_zero = m * (log(lambda1) - log(lambda0))
    log_ratio = log_ratio_zero + norms * (lambda0 - lambda1)

    def log_kernel(theta: float, extra: float) -> float:
        if theta <= 0.0 or theta >= 1.0:
            return -np.inf
        log_t, log_1mt = log(theta), log1m(theta)
        # (1−θ)Ψ0 + θΨ1 = Ψ0·[(1−θ) + θ·Ψ1/Ψ0]
        out = (a - 1.0 + extra) * log_t + (b - 1.0) * log_1mt
        out += (G - q_hat) * float(np.logaddexp(log_1mt, log_t + log_ratio_zero))
        out += float(np.sum(np.logaddexp(log_1mt, log_t + log_ratio)))
        return out

    grid = np.linspace(1e-6, 1.0 - 1e-6, 2001)
    shift = max(max(log_kernel(t, 0.0), log_kernel(t, 1.0)) for t in grid)
    points = list(grid[::100])

    def integral(extra: float) -> float:
        value, _ = integrate.quad(lambda t: np.exp(log_kernel(t, extra) - shift), 0.0, 1.0,
                                  points=points, limit=500, epsabs=0.0, epsrel=1e-10)
        return value

    num, den = integral(1.0), integral(0.0)
    if not (np.isfinite(num) and np.isfinite(den)) or den <= 0:
        raise NonFinite("theta posterior integrals are not finite")
    return num / den
