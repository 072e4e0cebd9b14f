import numpy as np
import pytest

from halsx import linkmodels as lm
from halsx import operators as ops
from halsx import solver as hx
from halsx.errors import NoSideInformationError

from oracles import plain_hals


def _rank_one_problem(n1=10, n2=8, seed=0):
    rng = np.random.default_rng(seed)
    u = np.abs(rng.standard_normal(n1)) + 0.1
    v = np.abs(rng.standard_normal(n2)) + 0.1
    V = np.outer(u, v)
    op = ops.MeasurementOperator.complete(n1, n2)
    return op, op.apply(V), V, u, v


class TestFit:
    def test_rank_one_recovery(self):
        op, b, V, _, _ = _rank_one_problem()
        feats = lm.FeatureSet.identity(10, 8)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=50, seed=1, kkt_epsilon=1e-8)
        model = hx.fit(op, b, feats, cfg)
        rrmse = np.linalg.norm(model.F_r @ model.F_c.T - V) / np.linalg.norm(V)
        assert rrmse < 1e-6
        assert model.n_iter <= 50

    def test_single_row_pass_closed_form(self):
        # with the partner column pinned at v, one row pass returns u exactly
        op, b, V, u, v = _rank_one_problem(seed=3)
        feats = lm.FeatureSet.identity(10, 8)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=1, seed=0,
                              kkt_epsilon=1e-300)
        rng = np.random.default_rng(5)
        model = hx.fit(op, b, feats, cfg,
                       init=(np.abs(rng.standard_normal((10, 1))), v[:, None].copy()))
        assert np.allclose(model.F_r[:, 0], u, atol=1e-12)

    def test_matches_plain_hals_reference(self):
        rng = np.random.default_rng(7)
        for trial in range(3):
            F1 = rng.uniform(size=(10, 3))
            F2 = rng.uniform(size=(8, 3))
            V = F1 @ F2.T
            op = ops.MeasurementOperator.complete(10, 8)
            b = op.apply(V)
            F_r0 = rng.uniform(size=(10, 3))
            F_c0 = rng.uniform(size=(8, 3))
            cfg = hx.SolverConfig(rank=3, max_outer_iter=30, seed=0,
                                  kkt_epsilon=1e-300)
            model = hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg,
                           init=(F_r0, F_c0))
            ref_trace, _, _ = plain_hals(V, F_r0, F_c0, 30)
            ours = [r["objective"] for r in model.trace]
            assert np.max(np.abs(np.array(ours) - np.array(ref_trace))) < 1e-12

    def test_monotone_descent_tracked(self):
        rng = np.random.default_rng(11)
        V = rng.uniform(size=(12, 9))
        op = ops.MeasurementOperator.complete(12, 9)
        cfg = hx.SolverConfig(rank=3, max_outer_iter=40, seed=2,
                              track_block_objectives=True)
        model = hx.fit(op, op.apply(V), lm.FeatureSet.identity(12, 9), cfg)
        diffs = np.diff(np.array(model.block_objectives))
        assert diffs.max() <= 1e-10

    def test_aggregate_mask_descent_and_feasibility(self):
        rng = np.random.default_rng(13)
        V = rng.uniform(size=(12, 6)) @ rng.uniform(size=(6, 9))
        op = ops.make_periodic_aggregates(12, 9, 3)
        b = op.apply(V)
        cfg = hx.SolverConfig(rank=2, max_outer_iter=30, seed=4,
                              track_block_objectives=True)
        model = hx.fit(op, b, lm.FeatureSet.identity(12, 9), cfg)
        assert np.diff(np.array(model.block_objectives)).max() <= 1e-10
        assert model.V.min() >= 0
        assert np.max(np.abs(op.apply(model.V) - b)) <= 1e-8

    def test_linear_features_recovery(self):
        # positive features and coefficients keep the truth in the span
        # with the ramp inactive, so it is recoverable exactly
        rng = np.random.default_rng(17)
        X_r = rng.uniform(0.1, 1.0, (20, 3))
        B = rng.uniform(0.5, 1.5, (3, 2))
        F_r = X_r @ B
        F_c = rng.uniform(0.5, 2.0, (15, 2))
        V = F_r @ F_c.T
        op = ops.MeasurementOperator.complete(20, 15)
        feats = lm.FeatureSet(X_r, np.eye(15), identity_cols=True)
        cfg = hx.SolverConfig(rank=2, max_outer_iter=300, seed=0,
                              kkt_epsilon=1e-10)
        model = hx.fit(op, op.apply(V), feats, cfg)
        rel = np.linalg.norm(model.F_r @ model.F_c.T - V) / np.linalg.norm(V)
        assert rel < 1e-3

    def test_stationarity_at_convergence(self):
        # classical HALS fixed point: max(0, R f / ||f||^2) == f per column
        op, b, V, _, _ = _rank_one_problem(seed=9)
        feats = lm.FeatureSet.identity(10, 8)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=80, seed=3, kkt_epsilon=1e-12)
        m = hx.fit(op, b, feats, cfg)
        R_i = m.V - m.F_r @ m.F_c.T + np.outer(m.F_r[:, 0], m.F_c[:, 0])
        f = m.F_c[:, 0]
        update = np.maximum(0.0, (R_i @ f) / (f @ f))
        assert np.allclose(update, m.F_r[:, 0], atol=1e-9)

    def test_fixed_point_implies_small_kkt(self):
        op, b, V, _, _ = _rank_one_problem(seed=13)
        feats = lm.FeatureSet.identity(10, 8)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=100, seed=7,
                              kkt_epsilon=1e-300)
        m = hx.fit(op, b, feats, cfg)
        # converged run: one more outer iteration changes nothing
        cfg2 = hx.SolverConfig(rank=1, max_outer_iter=1, seed=7,
                               kkt_epsilon=1e-300)
        m2 = hx.fit(op, b, feats, cfg2, init=(m.F_r, m.F_c))
        assert np.max(np.abs(m2.F_r - m.F_r)) < 1e-12
        assert np.max(np.abs(m2.F_c - m.F_c)) < 1e-12
        assert m2.kkt_final <= max(1e-8 * m2.kkt_initial, 1e-12)

    def test_degenerate_partner_floors_column(self):
        # one factor column of the init is zero on both sides: the row pass
        # cannot refit it and the floor keeps it away from exact zero
        rng = np.random.default_rng(19)
        op, b, V, u, v = _rank_one_problem(seed=21)
        F_r0 = np.column_stack([np.abs(rng.standard_normal(10)), np.zeros(10)])
        F_c0 = np.column_stack([np.abs(rng.standard_normal(8)), np.zeros(8)])
        cfg = hx.SolverConfig(rank=2, max_outer_iter=1, seed=0,
                              kkt_epsilon=1e-300)
        m = hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg,
                   init=(F_r0, F_c0))
        assert np.all(m.F_r[:, 1] > 0)
        assert np.all(m.F_r[:, 1] < 1e-10)

    def test_kkt_zero_at_exact_start(self):
        op, b, V, u, v = _rank_one_problem(seed=23)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=50, seed=0)
        m = hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg,
                   init=(u[:, None], v[:, None]))
        assert m.converged
        assert m.kkt_initial == 0.0


class TestKktResidual:
    def test_zero_at_exact_factorization(self):
        rng = np.random.default_rng(1)
        F_r = rng.uniform(size=(6, 2))
        F_c = rng.uniform(size=(5, 2))
        V = F_r @ F_c.T
        assert hx.kkt_residual(V, F_r, F_c) == 0.0

    def test_grows_continuously_with_perturbation(self):
        rng = np.random.default_rng(2)
        F_r = rng.uniform(size=(6, 2)) + 0.1
        F_c = rng.uniform(size=(5, 2)) + 0.1
        V = F_r @ F_c.T
        deltas = np.array([1e-6, 1e-5, 1e-4, 1e-3])
        vals = []
        for d in deltas:
            F_c2 = F_c.copy()
            F_c2[0, 0] += d
            vals.append(hx.kkt_residual(V, F_r, F_c2))
        vals = np.array(vals)
        assert np.all(np.diff(vals) > 0)
        # O(delta): ratios follow the perturbation ratios within a factor
        ratios = vals[1:] / vals[:-1]
        assert np.all((ratios > 3) & (ratios < 30))

    def test_converged_run_reduces_kkt(self):
        op, b, V, _, _ = _rank_one_problem(seed=5)
        cfg = hx.SolverConfig(rank=1, max_outer_iter=80, seed=2,
                              kkt_epsilon=1e-300)
        m = hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg)
        assert m.kkt_final < 1e-3 * m.kkt_initial

    def test_design_matrices_shape_blocks(self):
        rng = np.random.default_rng(3)
        F_r = rng.uniform(size=(6, 2))
        F_c = rng.uniform(size=(5, 2))
        V = F_r @ F_c.T + 0.01 * rng.standard_normal((6, 5))
        D_r = rng.standard_normal((6, 3))
        D_c = rng.standard_normal((5, 4))
        r_id = hx.kkt_residual(V, F_r, F_c)
        r_design = hx.kkt_residual(V, F_r, F_c, D_r, D_c)
        assert r_id > 0 and r_design > 0 and r_id != r_design


class TestPredict:
    def _model(self, seed=0):
        rng = np.random.default_rng(seed)
        X_r = rng.standard_normal((15, 3))
        X_c = rng.standard_normal((12, 2))
        feats = lm.FeatureSet(X_r, X_c)
        V = (np.maximum(0, X_r @ rng.uniform(0.2, 1, (3, 2))) + 0.1) @ \
            (np.maximum(0, X_c @ rng.uniform(0.2, 1, (2, 2))) + 0.1).T
        op = ops.MeasurementOperator.complete(15, 12)
        cfg = hx.SolverConfig(rank=2, max_outer_iter=60, seed=seed)
        return hx.fit(op, op.apply(V), feats, cfg), X_r, X_c

    def test_training_features_reproduce_product(self):
        model, X_r, X_c = self._model()
        pred = hx.predict(model, X_r, X_c)
        assert np.array_equal(pred.row, model.F_r @ model.F_c.T)
        assert np.array_equal(pred.col, model.F_r @ model.F_c.T)
        assert np.array_equal(pred.rowcol, model.F_r @ model.F_c.T)

    def test_zero_features_zero_intercept_linear(self):
        model, X_r, X_c = self._model(seed=1)
        pred = hx.predict(model, np.zeros((2, 3)))
        assert np.array_equal(pred.row, np.zeros((2, 12)))

    def test_block_shapes(self):
        model, X_r, X_c = self._model(seed=2)
        pred = hx.predict(model, np.ones((4, 3)), np.ones((6, 2)))
        assert pred.row.shape == (4, 12)
        assert pred.col.shape == (15, 6)
        assert pred.rowcol.shape == (4, 6)

    def test_identity_model_refuses_new_rows(self):
        op, b, V, _, _ = _rank_one_problem()
        cfg = hx.SolverConfig(rank=1, max_outer_iter=10, seed=0)
        m = hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg)
        with pytest.raises(NoSideInformationError):
            hx.predict(m, np.eye(10))

    def test_requires_some_features(self):
        model, _, _ = self._model(seed=3)
        with pytest.raises(ValueError):
            hx.predict(model)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        X_r = rng.standard_normal((12, 2))
        feats = lm.FeatureSet(X_r, np.eye(9), identity_cols=True)
        V = rng.uniform(size=(12, 9))
        op = ops.make_periodic_aggregates(12, 9, 4)
        cfg = hx.SolverConfig(rank=2, max_outer_iter=15, seed=5)
        model = hx.fit(op, op.apply(V), feats, cfg)
        hx.save_model(model, tmp_path / "model")
        back = hx.load_model(tmp_path / "model")
        assert np.allclose(back.F_r, model.F_r)
        assert np.allclose(back.F_c, model.F_c)
        assert np.allclose(back.V, model.V)
        assert back.k == model.k and back.converged == model.converged
        assert len(back.trace) == len(model.trace)
        p1 = hx.predict(model, X_r)
        p2 = hx.predict(back, X_r)
        assert np.allclose(p1.row, p2.row)


class TestConfigValidation:
    def test_bad_rank(self):
        with pytest.raises(ValueError):
            hx.SolverConfig(rank=0)

    def test_bad_tolerance(self):
        with pytest.raises(ValueError):
            hx.SolverConfig(kkt_epsilon=0.0)

    def test_bad_family(self):
        with pytest.raises(ValueError):
            hx.SolverConfig(row_family="cubist")

    def test_identity_features_require_linear(self):
        op, b, V, _, _ = _rank_one_problem()
        cfg = hx.SolverConfig(rank=1, row_family="spline")
        with pytest.raises(ValueError, match="identity"):
            hx.fit(op, b, lm.FeatureSet.identity(10, 8), cfg)
