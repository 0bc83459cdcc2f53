"""
Генераторы синтетических данных и подсчет метрик: MSE на новой выборке,
точность и полнота отбора групп, покрытие интервалов, время итерации.

Каждая реплика получает собственный поток Philox из SeedSequence(seed).spawn,
поэтому результаты не зависят от числа потоков.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from basis_expansion import BasisSpec, GamRecipe, InteractionSpec
from errors import SsglValidationError
from debias_inference import build_theta, confidence_intervals, debias, to_original_scale
from grouped_design import GroupSpec, LinearRecipe
from jobs import run_jobs
from model_selection import format_cv_error, kfold_cv, refit
from ssgl_solver import (
    DEFAULT_LADDER,
    SsglConfig,
    fit_group_lasso,
    fit_path,
    fit_single,
    group_lasso_grid,
)

logger = logging.getLogger("SSGL")

SCENARIOS = ("sparse_gam", "interaction", "coverage", "dense", "sigma_check", "many_groups", "timing")

# (n, p или G) по умолчанию
DEFAULT_SIZES = {
    "sparse_gam": (100, 300),
    "interaction": (300, 25),
    "coverage": (100, 100),
    "dense": (100, 300),
    "sigma_check": (500, 500),
    "many_groups": (200, 2000),
    "timing": (300, 1000),
}

COVERAGE_HEAD = (0.0, 0.5, 0.25, 0.1, 0.0, 0.0, 0.7)
TIMING_LAMBDA0 = 20.0

Seed = Union[int, np.random.Generator]


class SimScenario(BaseModel):
    name: str
    n: Optional[int] = Field(default=None, ge=2)
    p: Optional[int] = Field(default=None, ge=1)
    rho: float = Field(default=0.0, ge=0.0, lt=1.0)
    replicates: int = Field(default=1, ge=1)
    seed: int = 0
    df_set: Tuple[int, ...] = (2, 3, 4)
    d_star: int = Field(default=2, ge=1)
    hierarchy: bool = False
    k_folds: int = Field(default=10, ge=2)
    lambda0_ladder: Tuple[float, ...] = DEFAULT_LADDER
    method: str = "ssgl"
    cv: bool = True
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _fill_sizes(self) -> "SimScenario":
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}, expected one of {SCENARIOS}")
        if self.method not in ("ssgl", "group_lasso"):
            raise ValueError(f"unknown method {self.method!r}")
        n, p = DEFAULT_SIZES[self.name]
        if self.n is None:
            self.n = n
        if self.p is None:
            self.p = p
        return self

    def solver_config(self) -> SsglConfig:
        return SsglConfig(lambda0_ladder=self.lambda0_ladder)


@dataclass
class SimDataset:
    """Обучающая и тестовая выборки одного размера с общей истиной.

    groups=None означает сплайновый план по сырым ковариатам.
    """

    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    truth: FrozenSet[str]
    mean: np.ndarray
    groups: Optional[List[GroupSpec]] = None
    beta_true: Optional[np.ndarray] = None
    truth_pairs: FrozenSet[str] = frozenset()


@dataclass
class SimReport:
    scenario: SimScenario
    replicates: pd.DataFrame
    aggregate: Dict[str, float]
    truth: List[str]
    selected: List[List[str]]
    pair_frequencies: Optional[pd.DataFrame] = None
    notes: List[str] = field(default_factory=lambda: [
        "precision is reported as 1 when no group is selected (TP + FP = 0)",
    ])

    def summary(self) -> dict:
        return {
            "scenario": self.scenario.model_dump(mode="json"),
            "aggregate": self.aggregate,
            "formatted": {k: format_cv_error(self.aggregate[k], self.aggregate.get(f"{k}_se", 0.0))
                          for k in ("mse", "precision", "recall") if k in self.aggregate},
            "truth": self.truth,
            "notes": self.notes,
        }


def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def _names(p: int) -> List[str]:
    return [f"x{j + 1}" for j in range(p)]


def _split(rng: np.random.Generator, n: int, X_all: np.ndarray, mean_all: np.ndarray, sigma: float = 1.0):
    y_all = mean_all + sigma * rng.standard_normal(mean_all.shape[0])
    return X_all[:n], y_all[:n], X_all[n:], y_all[n:], mean_all[:n]


def _linear_quadratic(Z: np.ndarray) -> Tuple[np.ndarray, List[GroupSpec]]:
    """Группы (z_j, z_j²), столбцы идут парами"""
    n, p = Z.shape
    X = np.empty((n, 2 * p))
    X[:, 0::2] = Z
    X[:, 1::2] = Z ** 2
    return X, [GroupSpec(id=name, size=2) for name in _names(p)]


# ----------------------
# Generators
# ----------------------

def sparse_gam_mean(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return (5.0 * np.sin(np.pi * X[:, 0]) + 2.5 * (X[:, 2] ** 2 - 0.5)
            + np.exp(X[:, 3]) + 3.0 * X[:, 4])


def gen_sparse_gam(n: int = 100, p: int = 300, seed: Seed = 0) -> SimDataset:
    """X ~ U(0,1)^p, f = 5sin(πx1) + 2.5(x3² − 0.5) + e^{x4} + 3x5, σ² = 1"""
    if p < 5:
        raise SsglValidationError("sparse_gam needs p >= 5")
    rng = _rng(seed)
    X_all = rng.uniform(0.0, 1.0, size=(2 * n, p))
    X, y, X_test, y_test, mean = _split(rng, n, X_all, sparse_gam_mean(X_all))
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=frozenset({"x1", "x3", "x4", "x5"}))


def interaction_mean(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return (2.5 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 2.0 * np.cos(np.pi * (X[:, 2] + X[:, 4]))
            + 2.0 * (X[:, 5] - 0.5) + 2.5 * X[:, 6])


def gen_interaction(n: int = 300, p: int = 25, seed: Seed = 0) -> SimDataset:
    """f = 2.5sin(πx1x2) + 2cos(π(x3 + x5)) + 2(x6 − 0.5) + 2.5x7, σ² = 1"""
    if p < 7:
        raise SsglValidationError("interaction scenario needs p >= 7")
    rng = _rng(seed)
    X_all = rng.uniform(0.0, 1.0, size=(2 * n, p))
    X, y, X_test, y_test, mean = _split(rng, n, X_all, interaction_mean(X_all))
    pairs = frozenset({"x1*x2", "x3*x5"})
    mains = frozenset({"x1", "x2", "x3", "x5", "x6", "x7"})
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=mains | pairs, truth_pairs=pairs)


def ar1_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gen_coverage(n: int = 100, G: int = 100, rho: float = 0.0, seed: Seed = 0) -> SimDataset:
    """Базовые z ~ N(0, AR1(ρ)); группа g = (z_g, z_g²); первые семь координат β заданы"""
    if G < 4:
        raise SsglValidationError("coverage scenario needs G >= 4")
    rng = _rng(seed)
    L = np.linalg.cholesky(ar1_covariance(G, rho))
    Z = rng.standard_normal((2 * n, G)) @ L.T
    X_all, groups = _linear_quadratic(Z)
    beta = np.zeros(2 * G)
    beta[:len(COVERAGE_HEAD)] = COVERAGE_HEAD
    X, y, X_test, y_test, mean = _split(rng, n, X_all, X_all @ beta)
    truth = frozenset(g.id for j, g in enumerate(groups) if np.any(beta[2 * j:2 * j + 2] != 0))
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean, truth=truth,
                      groups=groups, beta_true=beta)


def gen_dense(n: int = 100, p: int = 300, seed: Seed = 0) -> SimDataset:
    """f = Σ_{j≤20} 0.2x_j + 0.2x_j², x ~ N(0, 1)"""
    if p < 20:
        raise SsglValidationError("dense scenario needs p >= 20")
    rng = _rng(seed)
    X_all, groups = _linear_quadratic(rng.standard_normal((2 * n, p)))
    beta = np.zeros(2 * p)
    beta[:40] = 0.2
    X, y, X_test, y_test, mean = _split(rng, n, X_all, X_all @ beta)
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=frozenset(g.id for g in groups[:20]), groups=groups, beta_true=beta)


def gen_sigma_check(n: int = 500, G: Optional[int] = None, seed: Seed = 0) -> SimDataset:
    """f = 0.5x1 + 0.3x2 + 0.6x10² − 0.2x20, G = n групп (x, x²)"""
    G = n if G is None else G
    if G < 20:
        raise SsglValidationError("sigma_check scenario needs G >= 20")
    rng = _rng(seed)
    X_all, groups = _linear_quadratic(rng.standard_normal((2 * n, G)))
    beta = np.zeros(2 * G)
    beta[0], beta[2], beta[2 * 9 + 1], beta[2 * 19] = 0.5, 0.3, 0.6, -0.2
    X, y, X_test, y_test, mean = _split(rng, n, X_all, X_all @ beta)
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=frozenset({"x1", "x2", "x10", "x20"}), groups=groups, beta_true=beta)


def gen_many_groups(n: int = 200, G: int = 2000, m: int = 3, seed: Seed = 0) -> SimDataset:
    """G групп по m признаков N(0,1); ненулевые только последние четыре, β ~ N(0, 0.4²) заново на каждую выборку"""
    if G < 4:
        raise SsglValidationError("many_groups scenario needs G >= 4")
    rng = _rng(seed)
    X_all = rng.standard_normal((2 * n, G * m))
    beta = np.zeros(G * m)
    beta[-4 * m:] = rng.normal(0.0, 0.4, size=4 * m)
    X, y, X_test, y_test, mean = _split(rng, n, X_all, X_all @ beta)
    groups = [GroupSpec(id=f"g{g + 1}", size=m) for g in range(G)]
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=frozenset(g.id for g in groups[-4:]), groups=groups, beta_true=beta)


def gen_timing(n: int = 300, G: int = 1000, seed: Seed = 0) -> SimDataset:
    """G групп по 2 признака N(0,1); первые четыре группы с единичными коэффициентами"""
    rng = _rng(seed)
    X_all = rng.standard_normal((2 * n, 2 * G))
    beta = np.zeros(2 * G)
    beta[:8] = 1.0
    X, y, X_test, y_test, mean = _split(rng, n, X_all, X_all @ beta)
    groups = [GroupSpec(id=f"g{g + 1}", size=2) for g in range(G)]
    return SimDataset(X=X, y=y, X_test=X_test, y_test=y_test, mean=mean,
                      truth=frozenset(g.id for g in groups[:4]), groups=groups, beta_true=beta)


def generate(scenario: SimScenario, seed: Seed) -> SimDataset:
    n, p = scenario.n, scenario.p
    if scenario.name == "sparse_gam":
        return gen_sparse_gam(n, p, seed)
    if scenario.name == "interaction":
        return gen_interaction(n, p, seed)
    if scenario.name == "coverage":
        return gen_coverage(n, p, scenario.rho, seed)
    if scenario.name == "dense":
        return gen_dense(n, p, seed)
    if scenario.name == "sigma_check":
        return gen_sigma_check(n, p, seed)
    if scenario.name == "many_groups":
        return gen_many_groups(n, p, seed=seed)
    return gen_timing(n, p, seed)


# ----------------------
# Scoring
# ----------------------

def score_selection(selected: Iterable[str], truth: Iterable[str]) -> Dict[str, float]:
    """Точность и полнота на уровне групп; при TP + FP = 0 точность равна 1"""
    selected, truth = set(selected), set(truth)
    tp = len(selected & truth)
    fp = len(selected - truth)
    fn = len(truth - selected)
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return {"tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall}


def coverage_rate(lower: np.ndarray, upper: np.ndarray, truth: np.ndarray) -> float:
    lower, upper, truth = (np.asarray(v, dtype=float) for v in (lower, upper, truth))
    if truth.size == 0:
        return float("nan")
    return float(np.mean((lower <= truth) & (truth <= upper)))


def score(selected: Sequence[str], truth: Iterable[str], y_test: np.ndarray, pred: np.ndarray) -> Dict[str, float]:
    out = score_selection(selected, truth)
    out["mse"] = float(np.mean((np.asarray(y_test) - np.asarray(pred)) ** 2))
    return out


# ----------------------
# Replicates
# ----------------------

def _recipe(scenario: SimScenario, data: SimDataset):
    if data.groups is not None:
        return LinearRecipe(groups=list(data.groups))
    names = _names(data.X.shape[1])
    interactions = None
    if scenario.name == "interaction":
        interactions = InteractionSpec(d_star=scenario.d_star, hierarchy=scenario.hierarchy)
    return GamRecipe(spec=BasisSpec(df=scenario.df_set[0]), interactions=interactions, names=names)


def _fit(scenario: SimScenario, data: SimDataset):
    recipe = _recipe(scenario, data)
    config = scenario.solver_config()
    df_set = scenario.df_set if data.groups is None and scenario.name != "interaction" else (None,)
    if scenario.name == "interaction":
        df_set = (scenario.d_star,)
    if scenario.cv and scenario.name not in ("coverage", "sigma_check"):
        cv = kfold_cv(data.X, data.y, recipe, config, df_set=df_set, K=scenario.k_folds,
                      seed=scenario.seed, method=scenario.method)
        return refit(data.X, data.y, recipe, config, cv.chosen_penalty, cv.chosen_df, scenario.method)
    design = recipe.build(data.X, data.y, df=df_set[0])
    if scenario.method == "group_lasso":
        grid = group_lasso_grid(design)
        fit = fit_group_lasso(design, grid[len(grid) // 2])
        return design, fit, None
    path = fit_path(design, config)
    return design, path.final, path


def run_replicate(scenario: SimScenario, index: int, seed: np.random.SeedSequence) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    data = generate(scenario, rng)

    if scenario.name == "timing":
        design = LinearRecipe(groups=list(data.groups)).build(data.X, data.y)
        start = time.perf_counter()
        fit = fit_single(design, scenario.solver_config(), TIMING_LAMBDA0)
        seconds = time.perf_counter() - start
        return {"replicate": index, "G": len(data.groups), "p": data.X.shape[1],
                "seconds": seconds, "iterations": fit.iterations,
                "per_iteration": seconds / max(fit.iterations, 1), "selected": fit.selected_groups}

    start = time.perf_counter()
    design, fit, _ = _fit(scenario, data)
    seconds = time.perf_counter() - start
    pred = design.design.y_mean + design.expand(data.X_test) @ fit.beta_ortho
    row = {"replicate": index, "seconds": seconds, "selected": list(fit.selected_groups)}
    row.update(score(fit.selected_groups, data.truth, data.y_test, pred))
    if hasattr(fit, "sigma2"):
        row["sigma2"] = fit.sigma2
        row["lambda0"] = fit.lambda0

    if scenario.name == "coverage":
        grouped = design.design
        nodewise = build_theta(grouped.X)
        beta_d = debias(fit.beta_ortho, grouped.X, grouped.y, nodewise)
        out = confidence_intervals(beta_d, fit.sigma2, nodewise, grouped.X.T @ grouped.X / grouped.n,
                                   scenario.alpha, grouped.n, beta_hat=fit.beta_ortho)
        orig = to_original_scale(out, design.transforms, grouped)
        important = data.beta_true != 0
        row["coverage_important"] = coverage_rate(orig.ci_lower[important], orig.ci_upper[important],
                                                  data.beta_true[important])
        row["coverage_null"] = coverage_rate(orig.ci_lower[~important], orig.ci_upper[~important],
                                             data.beta_true[~important])
    return row


def _pair_frequencies(rows: List[dict], p: int) -> pd.DataFrame:
    names = _names(p)
    counts = {}
    for k in range(p):
        for l in range(k + 1, p):
            counts[f"{names[k]}*{names[l]}"] = 0
    for row in rows:
        for gid in row["selected"]:
            key = gid.rstrip("+")
            if key in counts:
                counts[key] += 1
    total = max(len(rows), 1)
    return pd.DataFrame({"pair": list(counts), "frequency": [c / total for c in counts.values()]})


def run_scenario(scenario: SimScenario, threads: int = 1) -> SimReport:
    """Все реплики сценария; агрегаты: средние по репликам в порядке индексов"""
    children = np.random.SeedSequence(scenario.seed).spawn(scenario.replicates)
    rows = run_jobs([lambda i=i, s=s: run_replicate(scenario, i, s) for i, s in enumerate(children)],
                    threads=threads)
    frame = pd.DataFrame([{k: v for k, v in r.items() if k != "selected"} for r in rows])
    aggregate: Dict[str, float] = {}
    for col in frame.columns:
        if col == "replicate":
            continue
        values = frame[col].to_numpy(dtype=float)
        values = values[np.isfinite(values)]
        if values.size == 0:
            continue
        aggregate[col] = float(values.mean())
        aggregate[f"{col}_se"] = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    if scenario.name == "sigma_check" and "sigma2" in frame:
        s2 = frame["sigma2"].to_numpy(dtype=float)
        aggregate["sigma2_median"] = float(np.median(s2))
        aggregate["sigma2_within_0.7_1.3"] = float(np.mean((s2 >= 0.7) & (s2 <= 1.3)))

    sample = generate(scenario, _rng(scenario.seed))
    pairs = _pair_frequencies(rows, scenario.p) if scenario.name == "interaction" else None
    logger.info("Scenario %s: %d replicates, aggregate=%s", scenario.name, scenario.replicates,
                {k: round(v, 4) for k, v in aggregate.items() if not k.endswith("_se")})
    return SimReport(scenario=scenario, replicates=frame, aggregate=aggregate,
                     truth=sorted(sample.truth), selected=[r["selected"] for r in rows],
                     pair_frequencies=pairs)


def timing_sweep(n: int = 300, g_values: Sequence[int] = tuple(range(100, 2001, 100)),
                 seed: int = 0, threads: int = 1) -> pd.DataFrame:
    """Время одной итерации при λ0 = 20 для каждого G"""
    frames = []
    for G in g_values:
        report = run_scenario(SimScenario(name="timing", n=n, p=G, seed=seed), threads=threads)
        frames.append(report.replicates)
    return pd.concat(frames, ignore_index=True)
