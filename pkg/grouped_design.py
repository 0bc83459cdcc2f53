"""
Модель данных групповой регрессии: учет групп, центрирование,
ортонормализация внутри групп (X_gᵀX_g = n·I) и обратный перевод
коэффициентов в исходную шкалу.
"""

import re
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from math import sqrt
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import solve_triangular

from errors import CsvFormatError, DimensionMismatch, RankDeficientGroup, SampleTooSmall

logger = logging.getLogger("SSGL")

RANK_RTOL = 1e-10
IDENTITY_ATOL = 1e-12


class GroupSpec(BaseModel):
    """Описание группы коэффициентов"""

    model_config = ConfigDict(frozen=True)

    id: str
    size: int = Field(ge=1)
    penalized: bool = True

    @property
    def scale(self) -> float:
        # множитель для lambda0: группы разного размера штрафуются одинаково
        return sqrt(self.size)


@dataclass(frozen=True)
class OrthoTransform:
    group_id: str
    matrix: np.ndarray
    rank: int

    def is_identity(self) -> bool:
        return np.array_equal(self.matrix, np.eye(self.matrix.shape[0]))


@dataclass(frozen=True)
class GroupedDesign:
    """Отклик и матрица плана, разбитая на непрерывные блоки столбцов по группам.

    y_mean и x_means хранят исходные средние, чтобы предсказывать в исходной шкале.
    """

    y: np.ndarray
    X: np.ndarray
    groups: Tuple[GroupSpec, ...]
    y_mean: float = 0.0
    x_means: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"X {X.shape} and y {y.shape} do not match")
        width = sum(g.size for g in self.groups)
        if width != X.shape[1]:
            raise DimensionMismatch(f"group sizes sum to {width}, X has {X.shape[1]} columns")
        ids = [g.id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DimensionMismatch("group ids must be unique")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.x_means is None:
            object.__setattr__(self, "x_means", np.zeros(X.shape[1]))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def slices(self) -> List[slice]:
        out, start = [], 0
        for g in self.groups:
            out.append(slice(start, start + g.size))
            start += g.size
        return out

    @property
    def group_ids(self) -> List[str]:
        return [g.id for g in self.groups]

    @property
    def n_penalized(self) -> int:
        return sum(1 for g in self.groups if g.penalized)

    def block(self, index: int) -> np.ndarray:
        return self.X[:, self.slices[index]]

    def group_norms(self, beta: np.ndarray) -> np.ndarray:
        return np.array([np.linalg.norm(beta[s]) for s in self.slices])

    def with_arrays(self, y: np.ndarray, X: np.ndarray, **kwargs) -> "GroupedDesign":
        return replace(self, y=y, X=X, **kwargs)


def design_from_blocks(y: np.ndarray, blocks: Sequence[Tuple[GroupSpec, np.ndarray]]) -> GroupedDesign:
    """Собирает план из списка (группа, блок столбцов)"""
    specs = [spec for spec, _ in blocks]
    mats = []
    for spec, mat in blocks:
        mat = np.asarray(mat, dtype=float)
        if mat.ndim == 1:
            mat = mat[:, None]
        if mat.shape[1] != spec.size:
            raise DimensionMismatch(f"group {spec.id!r}: size {spec.size} but block has {mat.shape[1]} columns")
        mats.append(mat)
    return GroupedDesign(y=y, X=np.hstack(mats), groups=tuple(specs))


# ----------------------
# Centering / orthonormalization
# ----------------------

def center(design: GroupedDesign) -> GroupedDesign:
    """Центрирует столбцы X и отклик y; средние накапливаются в y_mean / x_means"""
    x_shift = design.X.mean(axis=0)
    y_shift = float(design.y.mean())
    return design.with_arrays(
        y=design.y - y_shift,
        X=design.X - x_shift,
        y_mean=design.y_mean + y_shift,
        x_means=design.x_means + x_shift,
    )


def _group_transform(block: np.ndarray, spec: GroupSpec, n: int) -> Tuple[np.ndarray, int]:
    if n <= spec.size:
        raise SampleTooSmall(spec.id, n, spec.size)
    s = np.linalg.svd(block, compute_uv=False)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
    if rank < spec.size:
        raise RankDeficientGroup(spec.id, rank, spec.size)
    gram = block.T @ block
    if np.allclose(gram, n * np.eye(spec.size), rtol=0.0, atol=IDENTITY_ATOL * n):
        return np.eye(spec.size), rank
    # тонкое QR; знаки выбираем так, чтобы диагональ R была положительной
    _, r = np.linalg.qr(block, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    r = signs[:, None] * r
    T = solve_triangular(r, sqrt(n) * np.eye(spec.size), lower=False)
    return T, rank


def orthonormalize(design: GroupedDesign) -> Tuple[GroupedDesign, List[OrthoTransform]]:
    """Приводит каждую группу к X_gᵀX_g = n·I; возвращает план и преобразования T_g"""
    n = design.n
    X = design.X.copy()
    transforms = []
    for spec, sl in zip(design.groups, design.slices):
        T, rank = _group_transform(design.X[:, sl], spec, n)
        X[:, sl] = design.X[:, sl] @ T
        transforms.append(OrthoTransform(group_id=spec.id, matrix=T, rank=rank))
    return design.with_arrays(y=design.y, X=X), transforms


def back_transform(beta_ortho: np.ndarray, transforms: Sequence[OrthoTransform]) -> np.ndarray:
    """Переводит коэффициенты из ортонормальной шкалы в исходную: β_g = T_g β_g^ortho"""
    beta_ortho = np.asarray(beta_ortho, dtype=float)
    width = sum(t.matrix.shape[0] for t in transforms)
    if beta_ortho.ndim != 1 or beta_ortho.shape[0] != width:
        raise DimensionMismatch(f"coefficient vector of length {beta_ortho.shape} vs design width {width}")
    out = np.zeros_like(beta_ortho)
    start = 0
    for t in transforms:
        m = t.matrix.shape[0]
        b = beta_ortho[start:start + m]
        if np.any(b != 0):
            out[start:start + m] = t.matrix @ b
        start += m
    return out


def forward_transform(beta_orig: np.ndarray, transforms: Sequence[OrthoTransform]) -> np.ndarray:
    """Обратное к back_transform: β^ortho_g = T_g⁻¹ β_g"""
    beta_orig = np.asarray(beta_orig, dtype=float)
    out = np.zeros_like(beta_orig)
    start = 0
    for t in transforms:
        m = t.matrix.shape[0]
        out[start:start + m] = np.linalg.solve(t.matrix, beta_orig[start:start + m])
        start += m
    return out


# ----------------------
# Prepared designs
# ----------------------

@dataclass
class PreparedDesign:
    """Центрированный и ортонормализованный план вместе со статистиками обучения.

    expand() переводит новые сырые строки в шкалу обучения, используя только
    средние и преобразования, посчитанные на обучающей выборке.
    """

    design: GroupedDesign
    transforms: List[OrthoTransform]
    column_names: List[str] = field(default_factory=list)

    @property
    def y_mean(self) -> float:
        return self.design.y_mean

    def expand(self, X_raw: np.ndarray) -> np.ndarray:
        X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
        if X_raw.shape[1] != self.design.p:
            raise DimensionMismatch(f"expected {self.design.p} columns, got {X_raw.shape[1]}")
        Z = X_raw - self.design.x_means
        out = np.empty_like(Z)
        for t, sl in zip(self.transforms, self.design.slices):
            out[:, sl] = Z[:, sl] @ t.matrix
        return out

    def original_coefficients(self, beta_ortho: np.ndarray) -> np.ndarray:
        return back_transform(beta_ortho, self.transforms)

    def intercept(self, beta_ortho: np.ndarray) -> float:
        beta_orig = self.original_coefficients(beta_ortho)
        return float(self.design.y_mean - self.design.x_means @ beta_orig)

    def predict(self, X_raw: np.ndarray, beta_ortho: np.ndarray) -> np.ndarray:
        return self.design.y_mean + self.expand(X_raw) @ beta_ortho

    def statistics_digest(self) -> bytes:
        """Байтовое представление статистик обучения (для контроля утечек в CV)"""
        parts = [np.float64(self.design.y_mean).tobytes(), self.design.x_means.tobytes()]
        parts += [t.matrix.tobytes() for t in self.transforms]
        return b"".join(parts)

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "groups": [g.model_dump() for g in self.design.groups],
            "column_names": list(self.column_names),
            "y_mean": self.design.y_mean,
            "x_means": self.design.x_means.tolist(),
            "transforms": [t.matrix.tolist() for t in self.transforms],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreparedDesign":
        groups = tuple(GroupSpec(**g) for g in data["groups"])
        p = sum(g.size for g in groups)
        design = GroupedDesign(
            y=np.zeros(1), X=np.zeros((1, p)), groups=groups,
            y_mean=float(data["y_mean"]), x_means=np.asarray(data["x_means"], dtype=float),
        )
        transforms = []
        for g, mat in zip(groups, data["transforms"]):
            T = np.asarray(mat, dtype=float).reshape(g.size, g.size)
            transforms.append(OrthoTransform(group_id=g.id, matrix=T, rank=g.size))
        return cls(design=design, transforms=transforms, column_names=list(data["column_names"]))


@dataclass
class LinearRecipe:
    """Рецепт построения линейного группового плана из сырых столбцов"""

    groups: List[GroupSpec]
    column_names: List[str] = field(default_factory=list)

    def build(self, X_raw: np.ndarray, y: np.ndarray, df: Optional[int] = None) -> PreparedDesign:
        design = GroupedDesign(y=np.asarray(y, dtype=float), X=np.asarray(X_raw, dtype=float),
                               groups=tuple(self.groups))
        ortho, transforms = orthonormalize(center(design))
        return PreparedDesign(design=ortho, transforms=transforms, column_names=list(self.column_names))


def recipe_from_labels(column_names: Sequence[str], labels: Sequence[str],
                       unpenalized: Sequence[str] = ()) -> Tuple[LinearRecipe, List[int]]:
    """Группирует столбцы по меткам.

    Группы идут в порядке первого появления метки, столбцы внутри группы: в
    порядке заголовка. Возвращает рецепт и перестановку исходных столбцов.
    """
    order: Dict[str, List[int]] = {}
    for idx, label in enumerate(labels):
        order.setdefault(str(label), []).append(idx)
    unpen = set(unpenalized)
    unknown = unpen - set(order)
    if unknown:
        raise DimensionMismatch(f"unpenalized groups not present in data: {sorted(unknown)}")
    groups, perm = [], []
    for gid, cols in order.items():
        groups.append(GroupSpec(id=gid, size=len(cols), penalized=gid not in unpen))
        perm.extend(cols)
    names = [column_names[i] for i in perm]
    return LinearRecipe(groups=groups, column_names=names), perm


# ----------------------
# CSV ingestion
# ----------------------

_LINE_RE = re.compile(r"line (\d+)")


def read_numeric_csv(path: str) -> pd.DataFrame:
    """Читает CSV с заголовком; все значения должны быть числами"""
    if not Path(path).exists():
        raise CsvFormatError(path, "file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise CsvFormatError(path, f"malformed CSV: {e}", int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise CsvFormatError(path, "empty file") from e
    if frame.shape[0] == 0:
        raise CsvFormatError(path, "no data rows")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna()
    if bad.to_numpy().any():
        row_pos, col_pos = np.argwhere(bad.to_numpy())[0]
        # строка 1: заголовок
        raise CsvFormatError(
            path, f"non-numeric or missing value {frame.iat[row_pos, col_pos]!r} in column "
                  f"{frame.columns[col_pos]!r}", int(row_pos) + 2)
    return numeric.astype(float)


def load_grouped_csv(path: str, response: str, group_map_path: Optional[str] = None,
                     unpenalized: Sequence[str] = ()) -> Tuple[np.ndarray, np.ndarray, LinearRecipe]:
    """Загружает CSV и карту групп (JSON: имя столбца -> id группы).

    Без карты каждый столбец становится своей группой.
    """
    frame = read_numeric_csv(path)
    if response not in frame.columns:
        raise CsvFormatError(path, f"response column {response!r} not found")
    y = frame[response].to_numpy()
    covariates = [c for c in frame.columns if c != response]
    if not covariates:
        raise CsvFormatError(path, "no covariate columns")
    if group_map_path:
        try:
            mapping = json.loads(Path(group_map_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CsvFormatError(group_map_path, f"cannot read group map: {e}") from e
        missing = [c for c in covariates if c not in mapping]
        if missing:
            raise CsvFormatError(group_map_path, f"columns without group: {missing}")
        labels = [str(mapping[c]) for c in covariates]
    else:
        labels = list(covariates)
    recipe, perm = recipe_from_labels(covariates, labels, unpenalized)
    X = frame[covariates].to_numpy()[:, perm]
    logger.info("Loaded %s: n=%d, p=%d, groups=%d", path, X.shape[0], X.shape[1], len(recipe.groups))
    return X, y, recipe
