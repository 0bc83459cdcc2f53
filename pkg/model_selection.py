"""
K-кратная кросс-валидация по лестнице λ0 и числу степеней свободы
сплайна, выбор итоговой модели (минимум ошибки или правило одной
стандартной ошибки).
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import SsglError, SsglValidationError
from jobs import run_jobs
from ssgl_solver import SsglConfig, fit_group_lasso_path, fit_path, group_lasso_grid

logger = logging.getLogger("SSGL")

METHODS = ("ssgl", "group_lasso")
RULES = ("min", "1se")


@dataclass
class CvResult:
    """table: строки (df, penalty) со средней ошибкой на отложенных и ее se"""

    table: pd.DataFrame
    folds: np.ndarray
    chosen_penalty: float
    chosen_df: Optional[int]
    rule: str
    method: str
    seed: int
    invalid_cells: List[Tuple[int, Optional[int], str]] = field(default_factory=list)
    fold_checksums: Dict[Tuple[int, Optional[int]], str] = field(default_factory=dict)

    @property
    def chosen_lambda0(self) -> float:
        return self.chosen_penalty

    def summary(self) -> dict:
        best = self.table[(self.table["penalty"] == self.chosen_penalty)
                          & _df_mask(self.table, self.chosen_df)].iloc[0]
        return {
            "method": self.method,
            "rule": self.rule,
            "seed": self.seed,
            "k_folds": int(self.folds.max()) + 1,
            "chosen_penalty": self.chosen_penalty,
            "chosen_df": self.chosen_df,
            "cv_error": format_cv_error(best["mean_error"], best["se"]),
            "invalid_cells": [{"fold": f, "df": d, "error": msg} for f, d, msg in self.invalid_cells],
        }


def _df_mask(table: pd.DataFrame, df: Optional[int]) -> pd.Series:
    if df is None:
        return table["df"].isna()
    return table["df"] == df


def format_cv_error(mean: float, se: float, digits: int = 3) -> str:
    """Формат «среднее (se)», например "0.012 (0.003)" """
    return f"{mean:.{digits}f} ({se:.{digits}f})"


def assign_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Номер фолда для каждой строки; размеры фолдов отличаются не более чем на 1"""
    rng = np.random.Generator(np.random.Philox(seed))
    folds = np.empty(n, dtype=int)
    for k, part in enumerate(np.array_split(rng.permutation(n), K)):
        folds[part] = k
    return folds


def _path_betas(design, config: SsglConfig, method: str, penalties: Sequence[float]) -> List[Optional[np.ndarray]]:
    if method == "group_lasso":
        return [f.beta_ortho for f in fit_group_lasso_path(design, penalties)]
    path = fit_path(design, config.model_copy(update={"lambda0_ladder": tuple(penalties)}))
    by_lambda = {f.lambda0: f.beta_ortho for f in path.fits}
    return [by_lambda.get(float(lam)) for lam in penalties]


def _evaluate_cell(X_raw, y, recipe, config, method, penalties, folds, fold, df):
    train, test = folds != fold, folds == fold
    design = recipe.build(X_raw[train], y[train], df=df)
    checksum = hashlib.sha256(design.statistics_digest()).hexdigest()
    expanded = design.expand(X_raw[test])
    errors = []
    for beta in _path_betas(design, config, method, penalties):
        if beta is None:
            errors.append(np.nan)
            continue
        pred = design.design.y_mean + expanded @ beta
        errors.append(float(np.mean((y[test] - pred) ** 2)))
    return np.array(errors), checksum


def kfold_cv(X_raw: np.ndarray, y: np.ndarray, recipe, config: Optional[SsglConfig] = None,
             df_set: Sequence[Optional[int]] = (None,), K: int = 10, seed: int = 0,
             method: str = "ssgl", rule: str = "min", ladder: Optional[Sequence[float]] = None,
             threads: int = 1) -> CvResult:
    """Перебор (penalty, df) по K фолдам.

    recipe.build(X, y, df) строит план только по обучающим строкам фолда.
    Для ssgl penalty: значения λ0 (повторы в ladder допустимы и дают
    одинаковые столбцы), для group_lasso: значения λ из ladder, а без него
    сетка group_lasso_grid по полным данным.
    """
    if method not in METHODS:
        raise SsglValidationError(f"unknown method {method!r}")
    if rule not in RULES:
        raise SsglValidationError(f"unknown selection rule {rule!r}")
    X_raw = np.asarray(X_raw, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if K < 2 or (n < 2 * K and K != n):
        raise SsglValidationError(f"need n >= 2K for {K}-fold CV, got n={n}")
    config = config or SsglConfig()

    folds = assign_folds(n, K, seed)
    grids: Dict[Optional[int], List[float]] = {}
    requested: Dict[Optional[int], List[float]] = {}
    for df in df_set:
        if method == "group_lasso" and ladder is None:
            try:
                grids[df] = group_lasso_grid(recipe.build(X_raw, y, df=df))
            except SsglError as e:
                logger.warning("df=%s: cannot build full design for the lambda grid: %s", df, e)
                continue
            requested[df] = list(grids[df])
        else:
            requested[df] = [float(v) for v in (ladder if ladder is not None else config.lambda0_ladder)]
            grids[df] = sorted(set(requested[df]))

    cells = [(fold, df) for fold in range(K) for df in grids]

    def job(fold, df):
        try:
            return _evaluate_cell(X_raw, y, recipe, config, method, grids[df], folds, fold, df)
        except SsglError as e:
            return e

    results = run_jobs([lambda f=f, d=d: job(f, d) for f, d in cells], threads=threads)

    invalid: List[Tuple[int, Optional[int], str]] = []
    checksums: Dict[Tuple[int, Optional[int]], str] = {}
    errors: Dict[Optional[int], List[np.ndarray]] = {df: [] for df in grids}
    for (fold, df), res in zip(cells, results):
        if isinstance(res, Exception):
            logger.warning("CV cell fold=%d df=%s is invalid and excluded: %s", fold, df, res)
            invalid.append((fold, df, str(res)))
            continue
        errs, checksum = res
        errors[df].append(errs)
        checksums[(fold, df)] = checksum

    rows = []
    for df, grid in grids.items():
        if not errors[df]:
            continue
        mat = np.vstack(errors[df])
        position = {lam: i for i, lam in enumerate(grid)}
        for lam in requested[df]:
            col = mat[:, position[lam]]
            col = col[np.isfinite(col)]
            k = col.size
            mean = float(col.mean()) if k else np.nan
            se = float(col.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0
            rows.append({"df": df, "penalty": lam, "mean_error": mean, "se": se, "n_folds": k})
    table = pd.DataFrame(rows, columns=["df", "penalty", "mean_error", "se", "n_folds"])
    if table["mean_error"].notna().sum() == 0:
        raise SsglValidationError("every cross-validation cell failed")

    result = CvResult(table=table, folds=folds, chosen_penalty=np.nan, chosen_df=None,
                      rule=rule, method=method, seed=seed, invalid_cells=invalid,
                      fold_checksums=checksums)
    result.chosen_penalty, result.chosen_df = select_model(result, rule)
    logger.info("CV (%s, %s rule): penalty=%s df=%s", method, rule, result.chosen_penalty, result.chosen_df)
    return result


def select_model(cv: CvResult, rule: str = "min") -> Tuple[float, Optional[int]]:
    """Минимум средней ошибки; при равенстве: больший penalty, затем меньший df.

    rule="1se": наибольший penalty при том же df, чья ошибка не превышает
    минимум плюс его стандартную ошибку.
    """
    if rule not in RULES:
        raise SsglValidationError(f"unknown selection rule {rule!r}")
    table = cv.table[cv.table["mean_error"].notna()].copy()
    table["df_key"] = table["df"].fillna(-1)
    ranked = table.sort_values(["mean_error", "penalty", "df_key"], ascending=[True, False, True],
                               kind="mergesort")
    best = ranked.iloc[0]
    penalty = float(best["penalty"])
    df = None if pd.isna(best["df"]) else int(best["df"])
    if rule == "1se":
        bound = best["mean_error"] + best["se"]
        same_df = table[(table["df_key"] == best["df_key"]) & (table["mean_error"] <= bound)]
        penalty = float(same_df["penalty"].max())
    return penalty, df


def refit(X_raw: np.ndarray, y: np.ndarray, recipe, config: SsglConfig, penalty: float,
          df: Optional[int] = None, method: str = "ssgl"):
    """Подгонка на всех данных до выбранного penalty; возвращает (план, итоговый fit, путь)"""
    design = recipe.build(X_raw, y, df=df)
    if method == "group_lasso":
        path = fit_group_lasso_path(design, [penalty])
        return design, path[0], path
    ladder = tuple(v for v in config.lambda0_ladder if v < penalty) + (float(penalty),)
    path = fit_path(design, config.model_copy(update={"lambda0_ladder": ladder}))
    return design, path.final, path
