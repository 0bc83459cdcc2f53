"""
Тесты модели данных: центрирование, ортонормализация, перевод шкал, CSV
"""

import json

import numpy as np
import pytest

from errors import CsvFormatError, DimensionMismatch, RankDeficientGroup, SampleTooSmall
from grouped_design import (
    GroupSpec,
    GroupedDesign,
    LinearRecipe,
    PreparedDesign,
    back_transform,
    center,
    forward_transform,
    load_grouped_csv,
    orthonormalize,
    read_numeric_csv,
    recipe_from_labels,
)


def _random_design(seed: int = 0, n: int = 50, sizes=(3, 1, 2)) -> GroupedDesign:
    rng = np.random.default_rng(seed)
    p = sum(sizes)
    groups = tuple(GroupSpec(id=f"g{i}", size=s) for i, s in enumerate(sizes))
    return GroupedDesign(y=rng.standard_normal(n), X=rng.normal(2.0, 3.0, (n, p)), groups=groups)


# ----------------------
# Orthonormalization
# ----------------------

def test_orthonormal_group_keeps_identity():
    n = 64
    X = np.column_stack([np.ones(n), np.tile([1.0, -1.0], n // 2)])
    design = GroupedDesign(y=np.zeros(n), X=X, groups=(GroupSpec(id="g", size=2),))
    _, transforms = orthonormalize(design)
    assert transforms[0].is_identity()


def test_single_column_is_rescaled():
    x = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    c = np.linalg.norm(x)
    design = GroupedDesign(y=np.zeros(5), X=x[:, None], groups=(GroupSpec(id="x", size=1),))
    ortho, transforms = orthonormalize(design)
    np.testing.assert_allclose(transforms[0].matrix, [[np.sqrt(5) / c]])
    np.testing.assert_allclose(ortho.X[:, 0], x * np.sqrt(5) / c)


def test_random_block_gram_is_scaled_identity():
    ortho, _ = orthonormalize(center(_random_design(sizes=(3,))))
    np.testing.assert_allclose(ortho.X.T @ ortho.X, 50 * np.eye(3), atol=1e-9)


def test_every_group_is_orthonormal():
    ortho, _ = orthonormalize(center(_random_design()))
    for sl, spec in zip(ortho.slices, ortho.groups):
        block = ortho.X[:, sl]
        np.testing.assert_allclose(block.T @ block, ortho.n * np.eye(spec.size), atol=1e-9)


def test_orthonormalize_twice_is_identity():
    once, _ = orthonormalize(center(_random_design(seed=3)))
    twice, transforms = orthonormalize(once)
    assert all(t.is_identity() for t in transforms)
    np.testing.assert_array_equal(twice.X, once.X)


def test_constant_column_is_rank_deficient():
    design = _random_design(sizes=(2, 1))
    X = design.X.copy()
    X[:, 2] = 4.0
    with pytest.raises(RankDeficientGroup):
        orthonormalize(center(design.with_arrays(y=design.y, X=X)))


def test_collinear_group_is_rank_deficient():
    design = _random_design(sizes=(2,))
    X = design.X.copy()
    X[:, 1] = 2.0 * X[:, 0]
    with pytest.raises(RankDeficientGroup) as info:
        orthonormalize(design.with_arrays(y=design.y, X=X))
    assert info.value.rank == 1


def test_group_wider_than_sample():
    design = _random_design(n=3, sizes=(3,))
    with pytest.raises(SampleTooSmall):
        orthonormalize(design)


def test_group_sizes_must_match_columns():
    with pytest.raises(DimensionMismatch):
        GroupedDesign(y=np.zeros(4), X=np.zeros((4, 3)), groups=(GroupSpec(id="a", size=2),))


# ----------------------
# Centering
# ----------------------

def test_centering_round_trip():
    design = _random_design()
    centered = center(design)
    np.testing.assert_allclose(centered.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(centered.X + centered.x_means, design.X)
    np.testing.assert_allclose(centered.y + centered.y_mean, design.y)


def test_centering_already_centered_input():
    centered = center(_random_design())
    again = center(centered)
    np.testing.assert_allclose(again.X, centered.X, atol=1e-12)
    np.testing.assert_allclose(again.x_means, centered.x_means)


# ----------------------
# Coefficient scales
# ----------------------

def test_back_transform_zero_and_identity():
    _, transforms = orthonormalize(center(_random_design()))
    np.testing.assert_array_equal(back_transform(np.zeros(6), transforms), np.zeros(6))
    n = 64
    X = np.column_stack([np.ones(n), np.tile([1.0, -1.0], n // 2)])
    _, ident = orthonormalize(GroupedDesign(y=np.zeros(n), X=X, groups=(GroupSpec(id="g", size=2),)))
    beta = np.array([0.2, -0.7])
    np.testing.assert_array_equal(back_transform(beta, ident), beta)


def test_fitted_values_invariant_across_scales():
    centered = center(_random_design(seed=4))
    ortho, transforms = orthonormalize(centered)
    beta = np.random.default_rng(9).standard_normal(ortho.p)
    np.testing.assert_allclose(ortho.X @ beta, centered.X @ back_transform(beta, transforms), atol=1e-8)


def test_forward_transform_inverts_back_transform():
    _, transforms = orthonormalize(center(_random_design(seed=5)))
    beta = np.random.default_rng(2).standard_normal(6)
    np.testing.assert_allclose(forward_transform(back_transform(beta, transforms), transforms), beta)


def test_back_transform_checks_length():
    _, transforms = orthonormalize(center(_random_design()))
    with pytest.raises(DimensionMismatch):
        back_transform(np.zeros(5), transforms)


# ----------------------
# Prepared designs
# ----------------------

def test_prepared_design_predicts_on_raw_scale():
    rng = np.random.default_rng(6)
    X = rng.normal(1.0, 2.0, (40, 4))
    y = rng.standard_normal(40) + 3.0
    prepared = LinearRecipe(groups=[GroupSpec(id="a", size=2), GroupSpec(id="b", size=2)]).build(X, y)
    beta = rng.standard_normal(4)
    fitted = prepared.design.y_mean + prepared.design.X @ beta
    np.testing.assert_allclose(prepared.predict(X, beta), fitted, atol=1e-8)
    direct = prepared.intercept(beta) + X @ prepared.original_coefficients(beta)
    np.testing.assert_allclose(direct, fitted, atol=1e-8)


def test_prepared_design_serialization_round_trip():
    rng = np.random.default_rng(7)
    X = rng.normal(0.0, 1.0, (30, 3))
    prepared = LinearRecipe(groups=[GroupSpec(id="a", size=1), GroupSpec(id="b", size=2)],
                            column_names=["u", "v", "w"]).build(X, rng.standard_normal(30))
    restored = PreparedDesign.from_dict(json.loads(json.dumps(prepared.to_dict())))
    beta = rng.standard_normal(3)
    X_new = rng.normal(0.0, 1.0, (10, 3))
    np.testing.assert_allclose(restored.predict(X_new, beta), prepared.predict(X_new, beta), atol=1e-8)
    assert restored.column_names == ["u", "v", "w"]


def test_statistics_digest_depends_only_on_training_rows():
    rng = np.random.default_rng(8)
    X, y = rng.standard_normal((20, 2)), rng.standard_normal(20)
    recipe = LinearRecipe(groups=[GroupSpec(id="a", size=2)])
    assert recipe.build(X, y).statistics_digest() == recipe.build(X, y).statistics_digest()
    assert recipe.build(X, y).statistics_digest() != recipe.build(X[:-1], y[:-1]).statistics_digest()


def test_recipe_from_labels_groups_in_first_seen_order():
    recipe, perm = recipe_from_labels(["a", "b", "c", "d"], ["g2", "g1", "g2", "g1"], unpenalized=["g1"])
    assert [g.id for g in recipe.groups] == ["g2", "g1"]
    assert [g.size for g in recipe.groups] == [2, 2]
    assert [g.penalized for g in recipe.groups] == [True, False]
    assert perm == [0, 2, 1, 3]
    assert recipe.column_names == ["a", "c", "b", "d"]


def test_recipe_rejects_unknown_unpenalized_group():
    with pytest.raises(DimensionMismatch):
        recipe_from_labels(["a"], ["g"], unpenalized=["h"])


# ----------------------
# CSV
# ----------------------

def test_read_csv_reports_malformed_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n3,4,5\n")
    with pytest.raises(CsvFormatError) as info:
        read_numeric_csv(str(path))
    assert info.value.row == 3


def test_read_csv_reports_non_numeric_value(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n3,x\n")
    with pytest.raises(CsvFormatError) as info:
        read_numeric_csv(str(path))
    assert info.value.row == 3
    assert "'x'" in str(info.value)


def test_read_csv_missing_file(tmp_path):
    with pytest.raises(CsvFormatError):
        read_numeric_csv(str(tmp_path / "nope.csv"))


def test_load_grouped_csv_with_group_map(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((12, 4))
    lines = ["x1,x2,y,x3"] + [",".join(repr(float(v)) for v in row) for row in data]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "g.json").write_text(json.dumps({"x1": "a", "x2": "b", "x3": "a"}))
    X, y, recipe = load_grouped_csv(str(tmp_path / "d.csv"), "y", str(tmp_path / "g.json"))
    np.testing.assert_array_equal(y, data[:, 2])
    np.testing.assert_array_equal(X, data[:, [0, 3, 1]])
    assert [(g.id, g.size) for g in recipe.groups] == [("a", 2), ("b", 1)]


def test_load_grouped_csv_without_response(tmp_path):
    (tmp_path / "d.csv").write_text("x1,x2\n1,2\n3,4\n")
    with pytest.raises(CsvFormatError):
        load_grouped_csv(str(tmp_path / "d.csv"), "y")
