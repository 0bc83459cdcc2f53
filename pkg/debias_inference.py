"""
Де-смещенная оценка и поточечные доверительные интервалы.

Приближенная обратная к Σ̂ = XᵀX/n собирается из p узловых lasso-регрессий
(каждый столбец на остальные); затем β_d = β̂ + Θ̂Xᵀ(Y − Xβ̂)/n.
"""

import logging
from dataclasses import dataclass
from math import log, sqrt
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import norm

from errors import DegenerateColumn, DimensionMismatch, InvalidAlpha, MaxIterExceeded
from grouped_design import GroupedDesign, OrthoTransform
from jobs import run_jobs

logger = logging.getLogger("SSGL")

KKT_TOL = 1e-7
TAU2_FLOOR = 1e-12


@dataclass
class NodewiseResult:
    theta_hat: np.ndarray
    tau2: np.ndarray
    lambdas: np.ndarray
    gammas: List[np.ndarray]

    @property
    def p(self) -> int:
        return self.theta_hat.shape[0]


@dataclass
class DebiasOutput:
    beta_hat: np.ndarray
    beta_d: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    cov: np.ndarray

    @property
    def z(self) -> float:
        return float(norm.ppf(1.0 - self.alpha / 2.0))

    def to_frame(self, group_ids: Sequence[str], column_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        p = self.beta_d.shape[0]
        names = list(column_names) if column_names else [f"b{j}" for j in range(p)]
        return pd.DataFrame({
            "coordinate": names,
            "group": list(group_ids),
            "estimate": self.beta_hat,
            "debiased": self.beta_d,
            "se": self.se,
            "lower": self.ci_lower,
            "upper": self.ci_upper,
        })


def default_lambda(n: int, p: int, c: float = 1.0) -> float:
    """c·√(log p / n)"""
    return c * sqrt(log(max(p, 1)) / n)


def lasso_cd(target: np.ndarray, predictors: np.ndarray, lam: float,
             tol: float = KKT_TOL, max_iter: int = 10_000) -> np.ndarray:
    """Минимизирует ‖x − Zγ‖²/n + 2λ‖γ‖₁ циклическим покоординатным спуском.

    Работает на ковариациях ZᵀZ/n и Zᵀx/n. Останов: по условиям KKT
    с точностью tol: |g_k| ≤ λ на нулях и g_k = λ·sign(γ_k) на активных,
    где g = Zᵀ(x − Zγ)/n. При λ = 0 решение точное: наименьшие квадраты
    с минимальной нормой.
    """
    target = np.asarray(target, dtype=float)
    Z = np.asarray(predictors, dtype=float)
    n = target.shape[0]
    if Z.ndim != 2 or Z.shape[0] != n:
        raise DimensionMismatch(f"predictors {Z.shape} do not match target of length {n}")
    q = Z.shape[1]
    gamma = np.zeros(q)
    if q == 0:
        return gamma
    if lam == 0.0:
        gamma, *_ = linalg.lstsq(Z, target)
        return gamma
    gram = Z.T @ Z / n
    cov = Z.T @ target / n
    diag = np.diag(gram).copy()
    grad = cov.copy()

    for sweep in range(1, max_iter + 1):
        for k in range(q):
            if diag[k] <= 0:
                continue
            rho = grad[k] + diag[k] * gamma[k]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / diag[k]
            delta = new - gamma[k]
            if delta != 0.0:
                grad -= gram[:, k] * delta
                gamma[k] = new
        active = gamma != 0
        viol_active = np.abs(grad[active] - lam * np.sign(gamma[active]))
        viol_zero = np.abs(grad[~active]) - lam
        worst = max(viol_active.max(initial=0.0), viol_zero.max(initial=-np.inf), 0.0)
        if worst <= tol:
            return gamma
    raise MaxIterExceeded(f"nodewise lasso did not reach KKT tolerance {tol:g} in {max_iter} sweeps")


def _node(X: np.ndarray, j: int, lam: float):
    n = X.shape[0]
    others = np.delete(X, j, axis=1)
    gamma = lasso_cd(X[:, j], others, lam)
    resid = X[:, j] - others @ gamma
    tau2 = float(resid @ resid) / n + lam * float(np.abs(gamma).sum())
    return gamma, tau2


def build_theta(X: np.ndarray, lambdas: Optional[Union[float, Sequence[float]]] = None,
                threads: int = 1) -> NodewiseResult:
    """Θ̂ = T̂⁻²Ĉ из узловых регрессий; узлы считаются параллельно"""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if lambdas is None:
        lams = np.full(p, default_lambda(n, p))
    else:
        lams = np.broadcast_to(np.asarray(lambdas, dtype=float), (p,)).copy()
    if np.any(lams < 0):
        raise DimensionMismatch("nodewise lambdas must be non-negative")

    results = run_jobs([lambda j=j: _node(X, j, lams[j]) for j in range(p)], threads=threads)

    C = np.eye(p)
    tau2 = np.empty(p)
    gammas = []
    for j, (gamma, t2) in enumerate(results):
        if t2 < TAU2_FLOOR:
            raise DegenerateColumn(f"column {j} is (nearly) a linear combination of the others: tau2={t2:.3g}")
        tau2[j] = t2
        C[j, np.arange(p) != j] = -gamma
        gammas.append(gamma)
    theta_hat = C / tau2[:, None]
    logger.debug("Nodewise Theta built: p=%d, lambda range [%.3g, %.3g]", p, lams.min(), lams.max())
    return NodewiseResult(theta_hat=theta_hat, tau2=tau2, lambdas=lams, gammas=gammas)


def _theta_matrix(theta) -> np.ndarray:
    return theta.theta_hat if isinstance(theta, NodewiseResult) else np.asarray(theta, dtype=float)


def debias(beta_hat: np.ndarray, X: np.ndarray, Y: np.ndarray, theta) -> np.ndarray:
    """β_d = β̂ + Θ̂Xᵀ(Y − Xβ̂)/n"""
    beta_hat = np.asarray(beta_hat, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    T = _theta_matrix(theta)
    n, p = X.shape
    if beta_hat.shape != (p,) or Y.shape != (n,) or T.shape != (p, p):
        raise DimensionMismatch(f"beta {beta_hat.shape}, X {X.shape}, Y {Y.shape}, Theta {T.shape} are inconsistent")
    return beta_hat + T @ (X.T @ (Y - X @ beta_hat)) / n


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha={alpha} must lie in (0, 1)")


def confidence_intervals(beta_d: np.ndarray, sigma2_hat: float, theta, sigma_hat: np.ndarray,
                         alpha: float, n: int, beta_hat: Optional[np.ndarray] = None) -> DebiasOutput:
    """se_j = √(σ̂²(Θ̂Σ̂Θ̂ᵀ)_jj / n), границы β_dj ∓ z_{1−α/2}·se_j"""
    _check_alpha(alpha)
    T = _theta_matrix(theta)
    beta_d = np.asarray(beta_d, dtype=float)
    cov = sigma2_hat * (T @ sigma_hat @ T.T) / n
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return DebiasOutput(
        beta_hat=beta_d.copy() if beta_hat is None else np.asarray(beta_hat, dtype=float),
        beta_d=beta_d, se=se, ci_lower=beta_d - z * se, ci_upper=beta_d + z * se,
        alpha=alpha, cov=cov,
    )


def to_original_scale(output: DebiasOutput, transforms: Sequence[OrthoTransform],
                      design: GroupedDesign) -> DebiasOutput:
    """β_g = T_g β_g^ortho, Cov_g = T_g Cov_g^ortho T_gᵀ по каждой группе"""
    if sum(t.matrix.shape[0] for t in transforms) != output.beta_d.shape[0]:
        raise DimensionMismatch("transforms do not cover the coefficient vector")
    p = output.beta_d.shape[0]
    B = np.zeros((p, p))
    for t, sl in zip(transforms, design.slices):
        B[sl, sl] = t.matrix
    cov = B @ output.cov @ B.T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    beta_d = B @ output.beta_d
    z = output.z
    return DebiasOutput(beta_hat=B @ output.beta_hat, beta_d=beta_d, se=se,
                        ci_lower=beta_d - z * se, ci_upper=beta_d + z * se,
                        alpha=output.alpha, cov=cov)


def run_debiased_inference(fit, design, alpha: float = 0.05,
                           lambdas: Optional[Union[float, Sequence[float]]] = None,
                           threads: int = 1, original_scale: bool = True) -> pd.DataFrame:
    """Полный конвейер: Θ̂ по плану подгонки, β_d, интервалы; таблица по координатам"""
    _check_alpha(alpha)
    grouped = design.design if hasattr(design, "design") else design
    X, Y = grouped.X, grouped.y
    n = grouped.n
    nodewise = build_theta(X, lambdas, threads=threads)
    beta_d = debias(fit.beta_ortho, X, Y, nodewise)
    output = confidence_intervals(beta_d, fit.sigma2, nodewise, X.T @ X / n, alpha, n,
                                  beta_hat=fit.beta_ortho)
    group_of = [spec.id for spec in grouped.groups for _ in range(spec.size)]
    names = list(getattr(design, "column_names", []) or [])
    frame = output.to_frame(group_of, names or None).assign(scale="orthonormal")
    if original_scale and hasattr(design, "transforms"):
        orig = to_original_scale(output, design.transforms, grouped)
        frame = pd.concat([frame, orig.to_frame(group_of, names or None).assign(scale="original")],
                          ignore_index=True)
    logger.info("De-biased inference: p=%d, alpha=%g, sigma2=%.4g", grouped.p, alpha, fit.sigma2)
    return frame
