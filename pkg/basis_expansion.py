"""
Сплайновые планы для непараметрической SSGL: базис натурального кубического
сплайна на каждую ковариату, тензорные блоки попарных взаимодействий,
очищенные от главных эффектов, и расширенные группы с иерархией.
"""

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.interpolate import BSpline
from scipy.linalg import lstsq, qr

from errors import DimensionMismatch, ExtrapolationWarning, TooFewDistinctValues
from grouped_design import (
    GroupSpec,
    GroupedDesign,
    OrthoTransform,
    PreparedDesign,
    center,
    design_from_blocks,
    orthonormalize,
)

logger = logging.getLogger("SSGL")

CUBIC = 3
EDGE_RTOL = 1e-12


class BasisSpec(BaseModel):
    df: int = Field(default=3, ge=1)
    kind: str = "natural"

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v: str) -> str:
        if v not in ("natural", "bspline"):
            raise ValueError(f"unknown basis kind {v!r}")
        return v


class InteractionSpec(BaseModel):
    """d_star: размер базиса каждой ковариаты в тензорном блоке"""

    d_star: int = Field(default=2, ge=1)
    pairs: Optional[List[Tuple[int, int]]] = None
    hierarchy: bool = False

    def resolve_pairs(self, p: int) -> List[Tuple[int, int]]:
        if self.pairs is None:
            return list(itertools.combinations(range(p), 2))
        out = []
        for k, l in self.pairs:
            if not (0 <= k < p and 0 <= l < p) or k == l:
                raise DimensionMismatch(f"invalid interaction pair ({k}, {l}) for p={p}")
            out.append((min(k, l), max(k, l)))
        return sorted(set(out))


def bspline_design(x: np.ndarray, knots: np.ndarray, degree: int = CUBIC) -> np.ndarray:
    """Полный (неограниченный) B-сплайновый базис по расширенному вектору узлов"""
    knots = np.asarray(knots, dtype=float)
    n_basis = knots.size - degree - 1
    spline = BSpline(knots, np.eye(n_basis), degree, extrapolate=True)
    return np.atleast_2d(spline(np.asarray(x, dtype=float)))


def _interior_knots(distinct: np.ndarray, n_interior: int) -> np.ndarray:
    """Внутренние узлы по квантилям различных значений x, повторы узлы не склеивают"""
    if n_interior <= 0:
        return np.empty(0)
    levels = np.arange(1, n_interior + 1) / (n_interior + 1)
    return np.quantile(distinct, levels)


@dataclass
class NaturalSplineBasis:
    """Базис одной ковариаты с зафиксированными узлами.

    Для kind="natural" столбцы: B-сплайны без первого, спроецированные на
    подпространство с нулевой второй производной в граничных узлах. За
    границами базис продолжается линейно.
    """

    boundary: Tuple[float, float]
    interior: np.ndarray
    df: int
    kind: str = "natural"
    degree: int = CUBIC
    _null: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=float)
        a, b = self.boundary
        all_knots = np.concatenate([[a], self.interior, [b]])
        if np.any(np.diff(all_knots) <= 0):
            raise TooFewDistinctValues(f"knots must be strictly increasing, got {all_knots.tolist()}")
        if self.kind == "natural":
            H = self._derivative_at_boundary(2)[:, 1:]
            Q, _ = qr(H.T)
            self._null = Q[:, 2:]

    @classmethod
    def fit(cls, x: np.ndarray, df: int, kind: str = "natural") -> "NaturalSplineBasis":
        x = np.asarray(x, dtype=float)
        distinct = np.unique(x)
        if distinct.size < df + 1:
            raise TooFewDistinctValues(f"need at least {df + 1} distinct values for df={df}, got {distinct.size}")
        if kind == "natural":
            degree, n_interior = CUBIC, df - 1
        else:
            degree = min(CUBIC, df)
            n_interior = df - degree
        interior = _interior_knots(distinct, n_interior)
        return cls(boundary=(float(distinct[0]), float(distinct[-1])), interior=interior,
                   df=df, kind=kind, degree=degree)

    @property
    def knots(self) -> np.ndarray:
        a, b = self.boundary
        pad = self.degree + 1
        return np.concatenate([[a] * pad, self.interior, [b] * pad])

    def _spline(self) -> BSpline:
        n_basis = self.knots.size - self.degree - 1
        return BSpline(self.knots, np.eye(n_basis), self.degree, extrapolate=True)

    def _derivative_at_boundary(self, order: int) -> np.ndarray:
        return np.atleast_2d(self._spline().derivative(order)(np.array(self.boundary)))

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Все B-сплайны с линейным продолжением за граничные узлы"""
        x = np.asarray(x, dtype=float)
        a, b = self.boundary
        spline = self._spline()
        out = np.atleast_2d(spline(np.clip(x, a, b)))
        below, above = x < a, x > b
        if below.any() or above.any():
            slope = np.atleast_2d(spline.derivative(1)(np.array([a, b])))
            out[below] += (x[below] - a)[:, None] * slope[0]
            out[above] += (x[above] - b)[:, None] * slope[1]
        return out

    def transform(self, x: np.ndarray, warn: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a, b = self.boundary
        tol = EDGE_RTOL * max(1.0, abs(a), abs(b))
        if warn and (np.any(x < a - tol) or np.any(x > b + tol)):
            warnings.warn(f"{int(np.sum((x < a - tol) | (x > b + tol)))} points outside "
                          f"boundary knots [{a:.6g}, {b:.6g}], extrapolating linearly",
                          ExtrapolationWarning, stacklevel=2)
        basis = self.raw(x)[:, 1:]
        if self.kind == "natural":
            basis = basis @ self._null
        return basis

    def to_dict(self) -> dict:
        return {"boundary": list(self.boundary), "interior": self.interior.tolist(),
                "df": self.df, "kind": self.kind, "degree": self.degree}

    @classmethod
    def from_dict(cls, data: dict) -> "NaturalSplineBasis":
        return cls(boundary=tuple(data["boundary"]), interior=np.asarray(data["interior"], dtype=float),
                   df=int(data["df"]), kind=data["kind"], degree=int(data["degree"]))


def spline_basis(x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """n×df базис с узлами по квантилям различных значений x"""
    return NaturalSplineBasis.fit(x, spec.df, spec.kind).transform(x)


def row_tensor(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Построчно vec(g_k g_lᵀ)"""
    n = left.shape[0]
    return (left[:, :, None] * right[:, None, :]).reshape(n, left.shape[1] * right.shape[1])


def residualize(block: np.ndarray, predictors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """МНК-остатки block на [1, predictors]; возвращает (остатки, коэффициенты Γ)"""
    Z = np.column_stack([np.ones(block.shape[0]), predictors])
    gamma, _, _, _ = lstsq(Z, block)
    return block - Z @ gamma, gamma


# ----------------------
# GAM design
# ----------------------

@dataclass
class GamDesign(PreparedDesign):
    """Аддитивный сплайновый план (с взаимодействиями или без).

    Первые len(main_bases) групп: главные эффекты, далее по группе на пару.
    expand() повторяет весь конвейер на новых сырых строках только по
    статистикам обучения: узлам, средним, Γ и преобразованиям T_g.
    """

    covariate_names: List[str] = field(default_factory=list)
    main_bases: List[NaturalSplineBasis] = field(default_factory=list)
    pair_bases: Dict[int, NaturalSplineBasis] = field(default_factory=dict)
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    gammas: List[np.ndarray] = field(default_factory=list)
    hierarchy: bool = False

    @property
    def n_main(self) -> int:
        return len(self.main_bases)

    def _main_blocks(self, X_raw: np.ndarray, warn: bool) -> List[np.ndarray]:
        slices = self.design.slices
        out = []
        for j, basis in enumerate(self.main_bases):
            sl = slices[j]
            raw = basis.transform(X_raw[:, j], warn=warn)
            out.append((raw - self.design.x_means[sl]) @ self.transforms[j].matrix)
        return out

    def _pair_raw(self, X_raw: np.ndarray, mains: List[np.ndarray], index: int) -> np.ndarray:
        k, l = self.pairs[index]
        tensor = row_tensor(self.pair_bases[k].transform(X_raw[:, k]),
                            self.pair_bases[l].transform(X_raw[:, l]))
        Z = np.column_stack([np.ones(X_raw.shape[0]), mains[k], mains[l]])
        resid = tensor - Z @ self.gammas[index]
        if self.hierarchy:
            return np.column_stack([mains[k], mains[l], resid])
        return resid

    def expand(self, X_raw: np.ndarray, warn: bool = False) -> np.ndarray:
        X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
        if X_raw.shape[1] != self.n_main:
            raise DimensionMismatch(f"expected {self.n_main} covariates, got {X_raw.shape[1]}")
        mains = self._main_blocks(X_raw, warn)
        blocks = list(mains)
        slices = self.design.slices
        for index in range(len(self.pairs)):
            g = self.n_main + index
            raw = self._pair_raw(X_raw, mains, index)
            blocks.append((raw - self.design.x_means[slices[g]]) @ self.transforms[g].matrix)
        return np.hstack(blocks)

    def predict(self, X_raw: np.ndarray, beta_ortho: np.ndarray, warn: bool = True) -> np.ndarray:
        return self.design.y_mean + self.expand(X_raw, warn=warn) @ beta_ortho

    def statistics_digest(self) -> bytes:
        parts = [super().statistics_digest()]
        parts += [np.asarray(b.knots).tobytes() for b in self.main_bases]
        parts += [g.tobytes() for g in self.gammas]
        return b"".join(parts)

    def to_dict(self) -> dict:
        data = super().to_dict()
        data.update({
            "kind": "gam",
            "covariate_names": list(self.covariate_names),
            "main_bases": [b.to_dict() for b in self.main_bases],
            "pair_bases": {str(k): b.to_dict() for k, b in self.pair_bases.items()},
            "pairs": [list(p) for p in self.pairs],
            "gammas": [g.tolist() for g in self.gammas],
            "hierarchy": self.hierarchy,
        })
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GamDesign":
        base = PreparedDesign.from_dict(data)
        return cls(
            design=base.design,
            transforms=base.transforms,
            column_names=base.column_names,
            covariate_names=list(data["covariate_names"]),
            main_bases=[NaturalSplineBasis.from_dict(b) for b in data["main_bases"]],
            pair_bases={int(k): NaturalSplineBasis.from_dict(b) for k, b in data["pair_bases"].items()},
            pairs=[tuple(p) for p in data["pairs"]],
            gammas=[np.asarray(g, dtype=float) for g in data["gammas"]],
            hierarchy=bool(data["hierarchy"]),
        )


def _names(p: int, names: Optional[Sequence[str]]) -> List[str]:
    if names is None:
        return [f"x{j + 1}" for j in range(p)]
    if len(names) != p:
        raise DimensionMismatch(f"{len(names)} names for {p} covariates")
    return list(names)


def build_main_design(X_raw: np.ndarray, spec: BasisSpec, y: Optional[np.ndarray] = None,
                      names: Optional[Sequence[str]] = None) -> GamDesign:
    """p групп по df столбцов; каждая центрирована и ортонормализована"""
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    n, p = X_raw.shape
    y = np.zeros(n) if y is None else np.asarray(y, dtype=float)
    names = _names(p, names)
    bases = [NaturalSplineBasis.fit(X_raw[:, j], spec.df, spec.kind) for j in range(p)]
    blocks = [(GroupSpec(id=names[j], size=spec.df), bases[j].transform(X_raw[:, j]))
              for j in range(p)]
    design, transforms = orthonormalize(center(design_from_blocks(y, blocks)))
    columns = [f"{names[j]}[{c}]" for j in range(p) for c in range(spec.df)]
    return GamDesign(design=design, transforms=transforms, column_names=columns,
                     covariate_names=names, main_bases=bases)


def augment_hierarchy(main: GamDesign, pair: Tuple[int, int], interaction: np.ndarray) -> Tuple[GroupSpec, np.ndarray]:
    """Группа [X̃_k, X̃_l, X̃_kl]: выбор пары тянет за собой оба главных эффекта"""
    k, l = pair
    X = main.design.X
    slices = main.design.slices
    block = np.column_stack([X[:, slices[k]], X[:, slices[l]], interaction])
    gid = f"{main.covariate_names[k]}*{main.covariate_names[l]}+"
    return GroupSpec(id=gid, size=block.shape[1]), block


def build_interaction_design(X_raw: np.ndarray, main: GamDesign, ispec: InteractionSpec) -> GamDesign:
    """Добавляет к главным эффектам по группе d*² на каждую пару (k, l).

    Тензорный блок очищается МНК-регрессией на [1, X̃_k, X̃_l], затем
    центрируется и ортонормализуется.
    """
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    p = main.n_main
    if X_raw.shape != (main.design.n, p):
        raise DimensionMismatch(f"raw covariates {X_raw.shape} do not match main design ({main.design.n}, {p})")
    pairs = ispec.resolve_pairs(p)
    used = sorted({j for pair in pairs for j in pair})
    kind = main.main_bases[0].kind if main.main_bases else "natural"
    pair_bases = {j: NaturalSplineBasis.fit(X_raw[:, j], ispec.d_star, kind) for j in used}
    star = {j: pair_bases[j].transform(X_raw[:, j]) for j in used}

    X_main = main.design.X
    slices = main.design.slices
    blocks, gammas = [], []
    for k, l in pairs:
        tensor = row_tensor(star[k], star[l])
        resid, gamma = residualize(tensor, np.column_stack([X_main[:, slices[k]], X_main[:, slices[l]]]))
        gammas.append(gamma)
        if ispec.hierarchy:
            blocks.append(augment_hierarchy(main, (k, l), resid))
        else:
            gid = f"{main.covariate_names[k]}*{main.covariate_names[l]}"
            blocks.append((GroupSpec(id=gid, size=resid.shape[1]), resid))

    if not blocks:
        return main
    pair_design, pair_transforms = orthonormalize(center(design_from_blocks(main.design.y, blocks)))
    design = GroupedDesign(
        y=main.design.y,
        X=np.hstack([main.design.X, pair_design.X]),
        groups=main.design.groups + pair_design.groups,
        y_mean=main.design.y_mean,
        x_means=np.concatenate([main.design.x_means, pair_design.x_means]),
    )
    columns = list(main.column_names)
    for spec in pair_design.groups:
        columns += [f"{spec.id}[{c}]" for c in range(spec.size)]
    logger.debug("Built %d interaction groups of width %d", len(pairs), blocks[0][0].size)
    return GamDesign(
        design=design,
        transforms=list(main.transforms) + list(pair_transforms),
        column_names=columns,
        covariate_names=list(main.covariate_names),
        main_bases=list(main.main_bases),
        pair_bases=pair_bases,
        pairs=pairs,
        gammas=gammas,
        hierarchy=ispec.hierarchy,
    )


@dataclass
class GamRecipe:
    """Рецепт NPSSL-плана; df в build() подменяет spec.df (перебор df в CV)"""

    spec: BasisSpec
    interactions: Optional[InteractionSpec] = None
    names: Optional[List[str]] = None

    def build(self, X_raw: np.ndarray, y: np.ndarray, df: Optional[int] = None) -> GamDesign:
        spec = self.spec if df is None else self.spec.model_copy(update={"df": df})
        design = build_main_design(X_raw, spec, y=y, names=self.names)
        if self.interactions is not None:
            design = build_interaction_design(X_raw, design, self.interactions)
        return design


# ----------------------
# Prediction
# ----------------------

def predict(fit, gam: GamDesign, X_raw: np.ndarray) -> np.ndarray:
    """Полная поверхность: ȳ + Σ_g X̃_g(x) β_g"""
    return gam.predict(X_raw, fit.beta_ortho)


def predict_effects(fit, gam: GamDesign, grid: Optional[Dict[str, Sequence[float]]] = None,
                    points: int = 101) -> pd.DataFrame:
    """Кривые главных эффектов f̂_j на сетке (столбцы covariate, grid_value, effect)"""
    beta_orig = gam.original_coefficients(fit.beta_ortho)
    slices = gam.design.slices
    frames = []
    for j, (name, basis) in enumerate(zip(gam.covariate_names, gam.main_bases)):
        if grid is not None and name not in grid:
            continue
        values = (np.asarray(grid[name], dtype=float) if grid is not None
                  else np.linspace(basis.boundary[0], basis.boundary[1], points))
        sl = slices[j]
        raw = basis.transform(values, warn=True)
        effect = (raw - gam.design.x_means[sl]) @ beta_orig[sl]
        frames.append(pd.DataFrame({"covariate": name, "grid_value": values, "effect": effect}))
    if not frames:
        return pd.DataFrame(columns=["covariate", "grid_value", "effect"])
    return pd.concat(frames, ignore_index=True)
