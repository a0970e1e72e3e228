import numpy as np
import pytest

from conftest import make_feature_table
from cxrseverity.core_data import TASKS
from cxrseverity.regress import (
    RegressionModel,
    design_matrix,
    feature_set_columns,
    feature_set_width,
    fit_ols,
    load_model,
    predict,
    save_model,
)


def normal_equations_oracle(X, y):
    """Textbook OLS with an explicit intercept column (full-rank only)."""
    X1 = np.hstack([np.ones((X.shape[0], 1)), X])
    beta = np.linalg.solve(X1.T @ X1, X1.T @ y)
    return beta[1:], beta[0]


def min_norm_oracle(X, y):
    """Pseudo-inverse solve of the centered system."""
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    w = np.linalg.pinv(xc) @ yc
    return w, y.mean() - X.mean(axis=0) @ w


class TestFitOls:
    def test_consistent_system_exact(self):
        model = fit_ols(np.array([[1.0], [2.0], [3.0]]), np.array([3.0, 5.0, 7.0]))
        assert model.weights == pytest.approx([2.0], abs=1e-12)
        assert model.intercept == pytest.approx(1.0, abs=1e-12)

    def test_min_norm_splits_duplicate_columns(self):
        c = np.array([1.0, -1.0, 2.0, -2.0])  # centered
        X = np.column_stack([c, c])
        model = fit_ols(X, 2.0 * c)
        assert model.weights == pytest.approx([1.0, 1.0], abs=1e-10)
        assert model.intercept == pytest.approx(0.0, abs=1e-10)

    def test_matches_normal_equations_oracle(self, rng):
        for _ in range(20):
            n, p = int(rng.integers(8, 50)), int(rng.integers(1, 7))
            X = rng.normal(0, 3, (n, p))
            y = rng.normal(0, 2, n)
            model = fit_ols(X, y)
            w_ref, b_ref = normal_equations_oracle(X, y)
            assert np.max(np.abs(model.weights - w_ref)) < 1e-8
            assert abs(model.intercept - b_ref) < 1e-8

    def test_residuals_centered_and_orthogonal(self, rng):
        X = rng.normal(0, 2, (30, 5))
        y = rng.normal(0, 3, 30)
        model = fit_ols(X, y)
        residuals = y - predict(model, X)
        assert abs(residuals.mean()) < 1e-9
        xc = X - X.mean(axis=0)
        scale = np.linalg.norm(xc, axis=0) * np.linalg.norm(residuals) + 1.0
        assert np.all(np.abs(xc.T @ residuals) < 1e-8 * scale)

    def test_rank_deficient_min_norm(self, rng):
        for _ in range(10):
            n, p = int(rng.integers(3, 8)), int(rng.integers(9, 20))
            X = rng.normal(0, 1, (n, p))
            y = rng.normal(0, 1, n)
            model = fit_ols(X, y)
            w_ref, b_ref = min_norm_oracle(X, y)
            assert np.linalg.norm(model.weights) <= np.linalg.norm(w_ref) + 1e-8
            # same training error: both are least-squares minimizers
            mse_fit = np.mean((y - predict(model, X)) ** 2)
            mse_ref = np.mean((y - (X @ w_ref + b_ref)) ** 2)
            assert mse_fit <= mse_ref + 1e-8

    def test_duplicating_whole_dataset_is_noop(self, rng):
        X = rng.normal(0, 1, (12, 4))
        y = rng.normal(0, 1, 12)
        base = fit_ols(X, y)
        doubled = fit_ols(np.vstack([X, X]), np.concatenate([y, y]))
        scale = np.abs(base.weights) + 1.0
        assert np.all(np.abs(base.weights - doubled.weights) < 1e-8 * scale)
        assert abs(base.intercept - doubled.intercept) < 1e-8

    def test_duplicating_row_of_consistent_system_is_noop(self, rng):
        # with zero residuals the duplicated row adds no pull on the fit
        X = rng.normal(0, 1, (10, 3))
        w0, b0 = np.array([1.5, -2.0, 0.5]), 0.7
        y = X @ w0 + b0
        base = fit_ols(X, y)
        dup = fit_ols(np.vstack([X, X[4]]), np.append(y, y[4]))
        assert np.max(np.abs(base.weights - dup.weights)) < 1e-8
        assert abs(base.intercept - dup.intercept) < 1e-8

    def test_zero_rows_rejected(self):
        with pytest.raises(ValueError, match="zero rows"):
            fit_ols(np.empty((0, 2)), np.empty(0))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="rows"):
            fit_ols(np.ones((3, 2)), np.ones(4))

    def test_intercept_only(self):
        model = fit_ols(np.empty((4, 0)), np.array([1.0, 2.0, 3.0, 4.0]))
        assert model.width == 0
        assert model.intercept == pytest.approx(2.5)


class TestPredict:
    def test_intercept_only_constant(self):
        model = RegressionModel("none", "extent", np.empty(0), 2.0)
        assert predict(model, np.empty((5, 0))) == pytest.approx([2.0] * 5)

    def test_simple_affine(self):
        model = RegressionModel(None, None, np.array([2.0]), 1.0)
        assert predict(model, np.array([[0.0]])) == pytest.approx([1.0])

    def test_no_clipping(self):
        # an extent probe may legitimately predict below 0
        model = RegressionModel("opacity1", "extent", np.array([2.0]), 1.0)
        assert predict(model, np.array([[-0.9]])) == pytest.approx([-0.8])

    def test_width_mismatch_rejected(self):
        model = RegressionModel(None, None, np.array([1.0, 2.0]), 0.0)
        with pytest.raises(ValueError, match="shape"):
            predict(model, np.ones((3, 3)))


class TestDesignMatrix:
    def test_pneumonia4_columns_in_order(self, rng):
        table = make_feature_table(rng, n_patients=3, max_images=1)
        ids = table.image_ids()[:3]
        X = design_matrix(table, "pneumonia4", ids)
        assert X.shape == (3, 4)
        expected_cols = ("lung_opacity", "pneumonia", "infiltration", "consolidation")
        for i, image_id in enumerate(ids):
            outputs = table.get(image_id).features.outputs
            for j, task in enumerate(expected_cols):
                assert X[i, j] == outputs[task]

    def test_none_is_zero_width(self, rng):
        table = make_feature_table(rng, n_patients=5, max_images=1)
        X = design_matrix(table, "none", table.image_ids())
        assert X.shape == (len(table), 0)

    def test_all18_canonical_order(self, rng):
        table = make_feature_table(rng, n_patients=1, max_images=1)
        (image_id,) = table.image_ids()
        X = design_matrix(table, "all18", [image_id])
        outputs = table.get(image_id).features.outputs
        assert X.shape == (1, 18)
        assert list(X[0]) == [outputs[t] for t in TASKS]

    def test_intermediate_block(self, rng):
        table = make_feature_table(rng, n_patients=2, max_images=1, intermediate=True)
        ids = table.image_ids()
        X = design_matrix(table, "intermediate1024", ids)
        assert X.shape == (2, 1024)
        assert tuple(X[0]) == table.get(ids[0]).features.intermediate

    def test_intermediate_requires_block(self, rng):
        table = make_feature_table(rng, n_patients=2, max_images=1)
        with pytest.raises(ValueError, match="intermediate"):
            design_matrix(table, "intermediate1024", table.image_ids())

    def test_unknown_id_rejected(self, rng):
        table = make_feature_table(rng, n_patients=2, max_images=1)
        with pytest.raises(KeyError, match="nope"):
            design_matrix(table, "opacity1", ["nope"])

    def test_unknown_feature_set_rejected(self, rng):
        table = make_feature_table(rng, n_patients=2, max_images=1)
        with pytest.raises(ValueError, match="feature set"):
            design_matrix(table, "all19", table.image_ids())

    def test_rows_follow_requested_order(self, rng):
        table = make_feature_table(rng, n_patients=4, max_images=1)
        ids = table.image_ids()
        X_fwd = design_matrix(table, "opacity1", ids)
        X_rev = design_matrix(table, "opacity1", ids[::-1])
        assert np.array_equal(X_fwd[::-1], X_rev)


class TestFeatureSets:
    def test_widths(self):
        assert feature_set_width("none") == 0
        assert feature_set_width("opacity1") == 1
        assert feature_set_width("pneumonia4") == 4
        assert feature_set_width("all18") == 18
        assert feature_set_width("intermediate1024") == 1024

    def test_columns(self):
        assert feature_set_columns("opacity1") == ("lung_opacity",)
        assert feature_set_columns("all18") == TASKS
        assert len(feature_set_columns("intermediate1024")) == 1024

    def test_n_params_counts_intercept(self):
        model = RegressionModel("pneumonia4", "extent", np.zeros(4), 0.0)
        assert model.n_params == 5

    def test_model_width_must_match_feature_set(self):
        with pytest.raises(ValueError, match="width"):
            RegressionModel("opacity1", "extent", np.zeros(3), 0.0)


class TestModelPersistence:
    def test_roundtrip_exact(self, rng, tmp_path):
        model = RegressionModel(
            "pneumonia4",
            "opacity",
            rng.normal(0, 1, 4) * np.pi,
            float(rng.normal() * np.e),
        )
        path = tmp_path / "model.txt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.feature_set == "pneumonia4"
        assert loaded.target == "opacity"
        assert np.array_equal(loaded.weights, model.weights)
        assert loaded.intercept == model.intercept

    def test_roundtrip_intercept_only(self, tmp_path):
        model = RegressionModel("none", "extent", np.empty(0), -0.125)
        path = tmp_path / "model.txt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.width == 0
        assert loaded.intercept == -0.125

    def test_unnamed_model_not_saveable(self, tmp_path):
        model = RegressionModel(None, None, np.array([1.0]), 0.0)
        with pytest.raises(ValueError, match="feature_set"):
            save_model(model, tmp_path / "model.txt")

    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "model.txt"
        path.write_text("feature_set: opacity1\n")
        with pytest.raises(ValueError, match="missing keys"):
            load_model(path)
