"""
Тесты сплайновых базисов, блоков взаимодействий и предсказания по новым точкам
"""

import json
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.interpolate import BSpline

from basis_expansion import (
    BasisSpec,
    GamDesign,
    GamRecipe,
    InteractionSpec,
    NaturalSplineBasis,
    build_interaction_design,
    build_main_design,
    predict,
    predict_effects,
    residualize,
    row_tensor,
    spline_basis,
)
from errors import DimensionMismatch, ExtrapolationWarning, TooFewDistinctValues


def _uniform(n: int, p: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, (n, p))


# ----------------------
# Spline bases
# ----------------------

def test_natural_df1_is_affine():
    x = np.linspace(0.0, 2.0, 41)
    basis = NaturalSplineBasis.fit(x, 1)
    col = basis.transform(x)
    assert col.shape == (41, 1)
    np.testing.assert_allclose(np.diff(col[:, 0], 2), 0.0, atol=1e-10)
    assert abs(col[0, 0]) < 1e-12


@pytest.mark.parametrize("kind,df", [("natural", 2), ("natural", 3), ("natural", 5),
                                     ("bspline", 2), ("bspline", 3), ("bspline", 6)])
def test_basis_width_equals_df(kind, df):
    x = _uniform(80, 1)[:, 0]
    assert spline_basis(x, BasisSpec(df=df, kind=kind)).shape == (80, df)


def test_natural_basis_is_linear_beyond_boundary():
    x = _uniform(60, 1, seed=1)[:, 0]
    basis = NaturalSplineBasis.fit(x, 4)
    b = basis.boundary[1]
    outside = basis.transform(np.array([b + 0.5, b + 1.0, b + 1.5, b + 2.0]))
    np.testing.assert_allclose(np.diff(outside, 2, axis=0), 0.0, atol=1e-9)
    # вторая производная в граничных узлах равна нулю
    second = basis._derivative_at_boundary(2)[:, 1:] @ basis._null
    np.testing.assert_allclose(second, 0.0, atol=1e-8)


def test_basis_is_reproducible():
    x = _uniform(50, 1, seed=2)[:, 0]
    spec = BasisSpec(df=3)
    np.testing.assert_array_equal(spline_basis(x, spec), spline_basis(x, spec))


def test_too_few_distinct_values():
    with pytest.raises(TooFewDistinctValues):
        NaturalSplineBasis.fit(np.array([0.0, 1.0, 0.0, 1.0, 1.0]), 3)


def test_tied_values_keep_knots_apart():
    x = np.r_[np.zeros(50), 1.0, 2.0, 3.0, 4.0]
    basis = NaturalSplineBasis.fit(x, 3)
    assert np.all(np.diff(np.r_[basis.boundary[0], basis.interior, basis.boundary[1]]) > 0)
    out = spline_basis(x, BasisSpec(df=3))
    assert out.shape == (54, 3)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("kind", ["natural", "bspline"])
def test_raw_splines_sum_to_one(kind):
    x = _uniform(60, 1, seed=7)[:, 0]
    basis = NaturalSplineBasis.fit(x, 5, kind)
    grid = np.linspace(*basis.boundary, 101)
    np.testing.assert_allclose(basis.raw(grid).sum(axis=1), 1.0, atol=1e-12)


def test_raw_splines_match_scipy_design_matrix():
    x = _uniform(60, 1, seed=8)[:, 0]
    basis = NaturalSplineBasis.fit(x, 4)
    grid = np.linspace(*basis.boundary, 53)[1:-1]
    expected = BSpline.design_matrix(grid, basis.knots, basis.degree).toarray()
    np.testing.assert_allclose(basis.raw(grid), expected, atol=1e-12)


def test_unknown_basis_kind():
    with pytest.raises(ValidationError):
        BasisSpec(kind="wavelet")


def test_basis_serialization_round_trip():
    x = _uniform(70, 1, seed=3)[:, 0]
    basis = NaturalSplineBasis.fit(x, 4)
    restored = NaturalSplineBasis.from_dict(json.loads(json.dumps(basis.to_dict())))
    grid = np.linspace(-0.2, 1.2, 30)
    np.testing.assert_allclose(restored.transform(grid), basis.transform(grid), atol=1e-12)


def test_extrapolation_warns():
    basis = NaturalSplineBasis.fit(_uniform(40, 1)[:, 0], 3)
    with pytest.warns(ExtrapolationWarning):
        basis.transform(np.array([-1.0, 0.5]), warn=True)


# ----------------------
# Main-effect design
# ----------------------

def test_main_design_has_one_group_per_covariate():
    X = _uniform(60, 4)
    gam = build_main_design(X, BasisSpec(df=3))
    assert gam.design.p == 12
    assert [g.id for g in gam.design.groups] == ["x1", "x2", "x3", "x4"]
    assert gam.column_names[:3] == ["x1[0]", "x1[1]", "x1[2]"]


def test_main_design_with_mostly_zero_covariate():
    X = _uniform(60, 2, seed=9)
    X[:40, 1] = 0.0
    gam = build_main_design(X, BasisSpec(df=3))
    for sl in gam.design.slices:
        block = gam.design.X[:, sl]
        np.testing.assert_allclose(block.T @ block, 60 * np.eye(3), atol=1e-8)


def test_single_covariate_single_group():
    gam = build_main_design(_uniform(30, 1), BasisSpec(df=3))
    assert gam.design.n_groups == 1
    assert gam.design.groups[0].size == 3


def test_expand_reproduces_training_design():
    X = _uniform(80, 3, seed=4)
    gam = build_main_design(X, BasisSpec(df=4), y=np.arange(80.0))
    np.testing.assert_allclose(gam.expand(X), gam.design.X, atol=1e-8)


def test_surface_invariant_to_orthonormalization():
    X = _uniform(50, 2, seed=5)
    gam = build_main_design(X, BasisSpec(df=3))
    beta = np.random.default_rng(0).standard_normal(gam.design.p)
    raw = np.hstack([b.transform(X[:, j]) for j, b in enumerate(gam.main_bases)])
    surface = (raw - gam.design.x_means) @ gam.original_coefficients(beta)
    np.testing.assert_allclose(gam.design.X @ beta, surface, atol=1e-8)


# ----------------------
# Interactions
# ----------------------

def test_row_tensor_width_and_values():
    left = np.array([[1.0, 2.0], [3.0, 4.0]])
    right = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = row_tensor(left, right)
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out[0], [5.0, 6.0, 10.0, 12.0])


def test_residualize_is_orthogonal_to_predictors():
    rng = np.random.default_rng(6)
    predictors = rng.standard_normal((40, 3))
    block = rng.standard_normal((40, 4)) + predictors[:, :1]
    resid, gamma = residualize(block, predictors)
    assert gamma.shape == (4, 4)
    np.testing.assert_allclose(predictors.T @ resid, 0.0, atol=1e-9)
    np.testing.assert_allclose(resid.sum(axis=0), 0.0, atol=1e-9)


def test_residualize_twice_changes_nothing():
    rng = np.random.default_rng(10)
    predictors = rng.standard_normal((50, 2))
    block = rng.standard_normal((50, 3)) + 2.0 * predictors[:, 1:]
    once, _ = residualize(block, predictors)
    twice, gamma = residualize(once, predictors)
    np.testing.assert_allclose(twice, once, atol=1e-10)
    np.testing.assert_allclose(gamma, 0.0, atol=1e-10)


def test_pair_count_for_25_covariates():
    assert len(InteractionSpec().resolve_pairs(25)) == 300


def test_invalid_pair_rejected():
    with pytest.raises(DimensionMismatch):
        InteractionSpec(pairs=[(0, 0)]).resolve_pairs(3)


def test_interaction_group_width():
    X = _uniform(60, 3, seed=7)
    main = build_main_design(X, BasisSpec(df=2))
    gam = build_interaction_design(X, main, InteractionSpec(d_star=2))
    sizes = [g.size for g in gam.design.groups]
    assert sizes == [2, 2, 2, 4, 4, 4]
    assert [g.id for g in gam.design.groups][3:] == ["x1*x2", "x1*x3", "x2*x3"]


def test_hierarchy_group_width_and_columns():
    X = _uniform(60, 3, seed=8)
    main = build_main_design(X, BasisSpec(df=2))
    gam = build_interaction_design(X, main, InteractionSpec(d_star=2, hierarchy=True))
    pair = gam.design.groups[3]
    assert pair.id == "x1*x2+"
    assert pair.size == 8


def test_interactions_orthogonal_to_their_main_effects():
    X = _uniform(90, 3, seed=9)
    main = build_main_design(X, BasisSpec(df=3))
    gam = build_interaction_design(X, main, InteractionSpec(d_star=2, pairs=[(0, 2)]))
    slices = gam.design.slices
    pair_block = gam.design.X[:, slices[3]]
    for j in (0, 2):
        np.testing.assert_allclose(gam.design.X[:, slices[j]].T @ pair_block, 0.0, atol=1e-8)


def test_interaction_disabled_leaves_design_unchanged():
    X = _uniform(40, 2, seed=10)
    main = build_main_design(X, BasisSpec(df=2))
    recipe = GamRecipe(spec=BasisSpec(df=2))
    np.testing.assert_array_equal(recipe.build(X, np.zeros(40)).design.X, main.design.X)


@pytest.mark.parametrize("hierarchy", [False, True])
def test_interaction_expand_reproduces_training_design(hierarchy):
    X = _uniform(70, 3, seed=11)
    recipe = GamRecipe(spec=BasisSpec(df=3), interactions=InteractionSpec(d_star=2, hierarchy=hierarchy))
    gam = recipe.build(X, np.random.default_rng(1).standard_normal(70))
    np.testing.assert_allclose(gam.expand(X), gam.design.X, atol=1e-8)


def test_gam_design_serialization_round_trip():
    X = _uniform(70, 3, seed=12)
    recipe = GamRecipe(spec=BasisSpec(df=3), interactions=InteractionSpec(d_star=2, hierarchy=True))
    gam = recipe.build(X, np.random.default_rng(2).standard_normal(70))
    restored = GamDesign.from_dict(json.loads(json.dumps(gam.to_dict())))
    beta = np.random.default_rng(3).standard_normal(gam.design.p)
    X_new = _uniform(15, 3, seed=13)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        np.testing.assert_allclose(restored.predict(X_new, beta), gam.predict(X_new, beta), atol=1e-8)


# ----------------------
# Prediction
# ----------------------

def test_prediction_on_training_rows():
    X = _uniform(60, 2, seed=14)
    gam = build_main_design(X, BasisSpec(df=3), y=np.linspace(0.0, 1.0, 60))
    fit = SimpleNamespace(beta_ortho=np.random.default_rng(4).standard_normal(gam.design.p))
    expected = gam.design.y_mean + gam.design.X @ fit.beta_ortho
    np.testing.assert_allclose(predict(fit, gam, X), expected, atol=1e-8)


def test_zero_coefficients_give_flat_curves():
    gam = build_main_design(_uniform(40, 2, seed=15), BasisSpec(df=3))
    curves = predict_effects(SimpleNamespace(beta_ortho=np.zeros(gam.design.p)), gam, points=11)
    assert list(curves.columns) == ["covariate", "grid_value", "effect"]
    assert len(curves) == 22
    np.testing.assert_array_equal(curves["effect"], 0.0)


def test_linear_basis_gives_straight_curve():
    gam = build_main_design(_uniform(40, 1, seed=16), BasisSpec(df=1))
    curves = predict_effects(SimpleNamespace(beta_ortho=np.array([0.7])), gam, points=21)
    np.testing.assert_allclose(np.diff(curves["effect"].to_numpy(), 2), 0.0, atol=1e-10)


def test_effect_grid_outside_knots_warns():
    gam = build_main_design(_uniform(40, 1, seed=17), BasisSpec(df=3))
    with pytest.warns(ExtrapolationWarning):
        predict_effects(SimpleNamespace(beta_ortho=np.ones(3)), gam, grid={"x1": [-0.5, 0.5, 1.5]})
