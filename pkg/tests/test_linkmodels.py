import numpy as np
import pytest

from halsx import linkmodels as lm
from halsx.errors import (
    DegenerateColumnError,
    DimensionMismatchError,
    RankDeficientFeaturesError,
)

from oracles import nnls_column_oracle


class TestReduceSubproblem:
    def test_rank_one_exact(self):
        rng = np.random.default_rng(0)
        u, v = rng.standard_normal(5), np.abs(rng.standard_normal(4))
        target, weight = lm.reduce_subproblem(np.outer(u, v), v)
        assert np.allclose(target, u)
        assert weight == pytest.approx(float(v @ v))

    def test_canonical_partner_selects_column(self):
        rng = np.random.default_rng(1)
        R = rng.standard_normal((6, 4))
        e1 = np.zeros(4)
        e1[0] = 1.0
        target, weight = lm.reduce_subproblem(R, e1)
        assert np.allclose(target, R[:, 0])
        assert weight == 1.0

    def test_frobenius_expansion_identity(self):
        # ||R - c f^T||^2 == w*||c - target||^2 + (||R||^2 - w*||target||^2)
        rng = np.random.default_rng(2)
        R = rng.standard_normal((5, 4))
        f = np.abs(rng.standard_normal(4)) + 0.1
        target, w = lm.reduce_subproblem(R, f)
        for _ in range(5):
            c = rng.standard_normal(5)
            lhs = np.sum((R - np.outer(c, f)) ** 2)
            rhs = w * np.sum((c - target) ** 2) + np.sum(R**2) - w * np.sum(target**2)
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_zero_partner_degenerate(self):
        with pytest.raises(DegenerateColumnError):
            lm.reduce_subproblem(np.ones((3, 2)), np.zeros(2))


class TestLinear:
    def test_identity_features_pass_target_through(self):
        target = np.array([1.0, -2.0, 3.0])
        link = lm.fit_linear(lm.LinearDesign(np.eye(3), identity=True), target)
        assert np.array_equal(link.coefficients, target)
        assert np.array_equal(link.evaluate(np.eye(3)), np.maximum(0, target))

    def test_orthonormal_columns(self):
        rng = np.random.default_rng(3)
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        y = rng.standard_normal(6)
        link = lm.fit_linear(Q, y)
        assert np.allclose(link.coefficients, Q.T @ y, atol=1e-12)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((8, 3))
        y = rng.standard_normal(8)
        link = lm.fit_linear(X, y)
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        assert np.max(np.abs(link.coefficients - beta)) < 1e-10

    def test_rank_deficient_rejected(self):
        X = np.ones((5, 2))
        with pytest.raises(RankDeficientFeaturesError):
            lm.LinearDesign(X)

    def test_evaluate_ramps(self):
        link = lm.LinearLink(np.array([1.0, -2.0]))
        assert np.array_equal(link.evaluate(np.eye(2)), [1.0, 0.0])

    def test_evaluate_dimension_mismatch(self):
        link = lm.LinearLink(np.array([1.0, 2.0]))
        with pytest.raises(DimensionMismatchError):
            link.evaluate(np.ones((3, 3)))


class TestSplineBasis:
    def test_partition_of_unity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(50)
        basis = lm.build_spline_basis(x, 10)
        assert np.allclose(basis.design.sum(axis=1), 1.0)
        assert basis.design.shape == (50, 10)
        assert basis.penalty.shape == (10, 10)

    def test_penalty_null_space_contains_linear(self):
        x = np.linspace(0.0, 1.0, 30)
        basis = lm.build_spline_basis(x, 8)
        y = 2.0 * x + 1.0
        c, *_ = np.linalg.lstsq(basis.design, y, rcond=None)
        assert np.max(np.abs(basis.design @ c - y)) < 1e-10
        assert abs(c @ basis.penalty @ c) < 1e-8

    def test_penalty_psd(self):
        basis = lm.build_spline_basis(np.linspace(0, 1, 25), 9)
        w = np.linalg.eigvalsh(basis.penalty)
        assert w.min() > -1e-10

    def test_larger_basis_fits_sine_better(self):
        x = np.linspace(0.0, 1.0, 50)
        y = np.sin(2 * np.pi * x)

        def rmse(L):
            basis = lm.build_spline_basis(x, L)
            link = lm.fit_spline([basis], x[:, None], y, 1.0,
                                 lambda_grid=[0.0])
            return float(np.sqrt(np.mean((link.raw(x[:, None]) - y) ** 2)))

        assert rmse(10) < rmse(4)

    def test_too_few_distinct_values(self):
        with pytest.raises(ValueError, match="distinct"):
            lm.build_spline_basis(np.array([1.0, 1.0, 2.0, 2.0]), 4)

    def test_minimum_dimension(self):
        with pytest.raises(ValueError, match=">= 4"):
            lm.build_spline_basis(np.linspace(0, 1, 10), 3)


class TestFitSpline:
    def test_huge_penalty_degenerates_to_linear_fit(self):
        x = np.linspace(0.0, 1.0, 30)
        y = np.sin(3 * x) + 0.1
        basis = lm.build_spline_basis(x, 8)
        link = lm.fit_spline([basis], x[:, None], y, 1.0, lambda_grid=[1e12])
        D = np.column_stack([np.ones(30), x])
        beta = np.linalg.lstsq(D, y, rcond=None)[0]
        assert np.max(np.abs(link.raw(x[:, None]) - D @ beta)) < 1e-8

    def test_saturated_basis_interpolates(self):
        rng = np.random.default_rng(6)
        x = np.linspace(0.0, 1.0, 8)
        y = rng.standard_normal(8)
        basis = lm.build_spline_basis(x, 8)
        link = lm.fit_spline([basis], x[:, None], y, 1.0, lambda_grid=[0.0])
        assert np.max(np.abs(link.raw(x[:, None]) - y)) < 1e-9

    def test_effective_penalty_halves_when_weight_doubles(self):
        # single-point grid pins the raw penalty, so the effective one is
        # raw/weight by construction
        x = np.linspace(0.0, 1.0, 20)
        y = np.cos(2 * x)
        basis = lm.build_spline_basis(x, 6)
        a = lm.fit_spline([basis], x[:, None], y, weight=1.0, lambda_grid=[0.5])
        b = lm.fit_spline([basis], x[:, None], y, weight=2.0, lambda_grid=[0.5])
        assert b.effective_penalty == pytest.approx(a.effective_penalty / 2)

    def test_rescaled_grid_restores_fit(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(25)
        y = np.sin(x) + 0.1 * rng.standard_normal(25)
        basis = lm.build_spline_basis(x, 7)
        grid = np.logspace(-6, 2, 9)
        a = lm.fit_spline([basis], x[:, None], y, weight=1.0, lambda_grid=grid)
        b = lm.fit_spline([basis], x[:, None], y, weight=2.0,
                          lambda_grid=2.0 * grid)
        assert np.allclose(a.raw(x[:, None]), b.raw(x[:, None]), atol=1e-12)
        assert b.lambda_ == pytest.approx(2.0 * a.lambda_)

    def test_gcv_attains_grid_minimum(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(30)
        y = np.sin(2 * x) + 0.3 * rng.standard_normal(30)
        basis = lm.build_spline_basis(x, 10)
        link = lm.fit_spline([basis], x[:, None], y, weight=1.5)
        assert link.gcv_scores is not None
        chosen = link.lambda_grid[np.argmin(link.gcv_scores)]
        assert link.lambda_ == pytest.approx(chosen)

    def test_training_point_evaluation_consistent(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((25, 2))
        y = rng.standard_normal(25)
        bases = [lm.build_spline_basis(X[:, j], 6) for j in range(2)]
        link = lm.fit_spline(bases, X, y, weight=1.0)
        assert np.array_equal(link.evaluate(X), np.maximum(0.0, link.raw(X)))

    def test_additive_multifeature(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((40, 3))
        y = np.sin(X[:, 0]) + X[:, 1] ** 2 + 0.5 * X[:, 2]
        bases = [lm.build_spline_basis(X[:, j], 7) for j in range(3)]
        link = lm.fit_spline(bases, X, y, weight=1.0)
        resid = link.raw(X) - y
        assert np.sqrt(np.mean(resid**2)) < 0.2

    def test_nonpositive_weight_rejected(self):
        basis = lm.build_spline_basis(np.linspace(0, 1, 10), 5)
        with pytest.raises(ValueError):
            lm.fit_spline([basis], np.linspace(0, 1, 10)[:, None],
                          np.zeros(10), weight=0.0)


class TestKernelRidge:
    def test_huge_ridge_shrinks_to_zero(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((6, 2))
        y = rng.standard_normal(6)
        link = lm.fit_kernel_ridge(X, y, ridge=1e12)
        assert np.max(np.abs(link.raw(X))) < 1e-9

    def test_zero_ridge_interpolates(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((6, 2))
        y = rng.standard_normal(6)
        link = lm.fit_kernel_ridge(X, y, ridge=0.0)
        assert np.max(np.abs(link.raw(X) - y)) < 1e-9

    def test_matches_dense_solve_oracle(self):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((6, 2))
        y = rng.standard_normal(6)
        bw = lm.median_heuristic_bandwidth(X)
        link = lm.fit_kernel_ridge(X, y, bandwidth=bw, ridge=0.3)
        K = lm._kernel_matrix(X, X, "rbf", bw)
        dual = np.linalg.solve(K + 0.3 * np.eye(6), y)
        assert np.max(np.abs(link.dual - dual)) < 1e-9

    def test_linear_kernel_needs_ridge(self):
        X = np.random.default_rng(14).standard_normal((5, 2))
        with pytest.raises(ValueError, match="ridge"):
            lm.fit_kernel_ridge(X, np.zeros(5), kernel="linear", ridge=0.0)

    def test_duplicate_points_not_pd(self):
        X = np.vstack([np.ones((2, 2)), np.zeros((1, 2))])
        with pytest.raises(ValueError, match="positive definite"):
            lm.fit_kernel_ridge(X, np.zeros(3), ridge=0.0)

    def test_evaluate_ramps(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((6, 1))
        y = np.array([1.0, -1.0, 2.0, -2.0, 0.5, -0.5])
        link = lm.fit_kernel_ridge(X, y, ridge=0.0)
        assert np.min(link.evaluate(X)) >= 0.0


class TestSubproblemOptimality:
    """Fit-then-ramp attains the nonneg-constrained optimum when the
    design/Gram has full row rank (one instance per family here; the
    acceptance suite sweeps 50)."""

    def _check(self, fit_ramped, R, f_c):
        target, weight = lm.reduce_subproblem(R, f_c)
        col = fit_ramped(target, weight)
        ours = float(np.sum((R - np.outer(col, f_c)) ** 2))
        oracle, _ = nnls_column_oracle(R, f_c)
        assert ours <= oracle + 1e-6

    def test_linear_full_rank(self):
        rng = np.random.default_rng(16)
        R = rng.standard_normal((6, 5))
        f_c = np.abs(rng.standard_normal(5)) + 0.1
        X = rng.standard_normal((6, 6))
        design = lm.LinearDesign(X)
        self._check(
            lambda t, w: lm.fit_linear(design, t).evaluate(X), R, f_c)

    def test_spline_saturated(self):
        rng = np.random.default_rng(17)
        R = rng.standard_normal((6, 5))
        f_c = np.abs(rng.standard_normal(5)) + 0.1
        x = np.sort(rng.standard_normal(6))
        basis = lm.build_spline_basis(x, 6)
        self._check(
            lambda t, w: lm.fit_spline([basis], x[:, None], t, w,
                                       lambda_grid=[0.0]).evaluate(x[:, None]),
            R, f_c)

    def test_kernel_interpolating(self):
        rng = np.random.default_rng(18)
        R = rng.standard_normal((6, 5))
        f_c = np.abs(rng.standard_normal(5)) + 0.1
        X = rng.standard_normal((6, 2))
        self._check(
            lambda t, w: lm.fit_kernel_ridge(X, t, ridge=0.0).evaluate(X),
            R, f_c)


class TestFeatureSet:
    def test_identity_flags(self):
        fs = lm.FeatureSet.identity(4, 3)
        assert fs.identity_rows and fs.identity_cols
        assert fs.n1 == 4 and fs.n2 == 3

    def test_rank_check_at_construction(self):
        with pytest.raises(RankDeficientFeaturesError):
            lm.FeatureSet(np.ones((5, 2)), np.eye(3), identity_cols=True)

    def test_designs_cached(self):
        rng = np.random.default_rng(19)
        fs = lm.FeatureSet(rng.standard_normal((5, 2)),
                           rng.standard_normal((4, 2)))
        assert fs.row_design() is fs.row_design()


class TestSerialization:
    def test_linear_roundtrip(self, tmp_path):
        link = lm.LinearLink(np.array([1.0, -2.0, 0.5]))
        lm.save_links([link], tmp_path / "links.json")
        back = lm.load_links(tmp_path / "links.json")[0]
        X = np.random.default_rng(0).standard_normal((4, 3))
        assert np.allclose(back.evaluate(X), link.evaluate(X))

    def test_spline_roundtrip(self, tmp_path):
        rng = np.random.default_rng(20)
        X = rng.standard_normal((20, 2))
        y = rng.standard_normal(20)
        bases = [lm.build_spline_basis(X[:, j], 6) for j in range(2)]
        link = lm.fit_spline(bases, X, y, weight=2.0)
        lm.save_links([link], tmp_path / "links.json")
        back = lm.load_links(tmp_path / "links.json")[0]
        Xnew = rng.standard_normal((7, 2))
        assert np.allclose(back.evaluate(Xnew), link.evaluate(Xnew))
        assert back.lambda_ == link.lambda_

    def test_kernel_roundtrip(self, tmp_path):
        rng = np.random.default_rng(21)
        X = rng.standard_normal((6, 2))
        link = lm.fit_kernel_ridge(X, rng.standard_normal(6), ridge=0.1)
        lm.save_links([link], tmp_path / "links.json")
        back = lm.load_links(tmp_path / "links.json")[0]
        Xnew = rng.standard_normal((5, 2))
        assert np.allclose(back.evaluate(Xnew), link.evaluate(Xnew))
