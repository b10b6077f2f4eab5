"""Real-valued factorization machine tests against brute-force oracles."""

import numpy as np
import pytest

from dfmrec import (
    DataError,
    Dataset,
    FmModel,
    NumericError,
    SparseInstance,
    TrainConfig,
    fm_objective,
    fm_predict,
    fm_train,
    load_fm,
    save_fm,
    solve_w,
)
from dfmrec.fmcore import score_dataset

from oracles import fm_predict_brute, ridge_normal_equations
from synth import random_dataset


def _random_model(rng, n, k):
    return FmModel(
        float(rng.normal()), rng.normal(0, 1, n), rng.normal(0, 1, (k, n))
    )


def _random_instance(rng, n, max_nnz=None):
    nnz = int(rng.integers(1, (max_nnz or n) + 1))
    idx = np.sort(rng.choice(n, min(nnz, n), replace=False))
    val = rng.uniform(-2, 2, idx.size)
    val[val == 0] = 0.5
    return SparseInstance(idx, val, 0.0)


class TestFmPredict:
    def test_bias_only(self):
        m = FmModel(2.0, np.zeros(3), np.zeros((2, 3)))
        x = SparseInstance(np.array([0, 2]), np.array([1.0, 4.0]), 0.0)
        assert fm_predict(m, x) == 2.0

    def test_single_pair(self):
        # n=2, k=1, embeddings 3 and 4: interaction is 3*4*1*1 = 12
        m = FmModel(0.0, np.zeros(2), np.array([[3.0, 4.0]]))
        x = SparseInstance(np.array([0, 1]), np.array([1.0, 1.0]), 0.0)
        assert fm_predict(m, x) == pytest.approx(12.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, k = 5, 3
            m = _random_model(rng, n, k)
            x = _random_instance(rng, n)
            want = fm_predict_brute(m.w0, m.w, m.V, x)
            got = fm_predict(m, x)
            assert got == pytest.approx(want, rel=1e-10, abs=1e-10)

    def test_index_out_of_range(self):
        m = _random_model(np.random.default_rng(1), 3, 2)
        x = SparseInstance(np.array([5]), np.array([1.0]), 0.0)
        with pytest.raises(DataError, match="out of range"):
            fm_predict(m, x)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        d = random_dataset(rng, n=12, m=40)
        m = _random_model(rng, 12, 4)
        batch = score_dataset(m, d, chunk=7)
        single = np.array([fm_predict(m, x) for x in d.instances])
        np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)


class TestFmObjective:
    def test_perfect_model_zero(self):
        m = FmModel(3.0, np.zeros(2), np.zeros((2, 2)))
        insts = tuple(
            SparseInstance(np.array([0]), np.array([1.0]), 3.0) for _ in range(4)
        )
        d = Dataset(insts, 2)
        assert fm_objective(m, d, TrainConfig(alpha=0.0, k=2)) == 0.0

    def test_zero_model_unit_targets(self):
        m = FmModel(0.0, np.zeros(2), np.zeros((2, 2)))
        insts = tuple(
            SparseInstance(np.array([0]), np.array([1.0]), 1.0) for _ in range(3)
        )
        d = Dataset(insts, 2)
        assert fm_objective(m, d, TrainConfig(alpha=0.0, k=2)) == 3.0

    def test_random_recomputation(self):
        rng = np.random.default_rng(9)
        d = random_dataset(rng, n=10, m=20)
        m = _random_model(rng, 10, 3)
        cfg = TrainConfig(alpha=0.37, k=3)
        want = sum(
            (inst.target - fm_predict_brute(m.w0, m.w, m.V, inst)) ** 2
            for inst in d.instances
        ) + 0.37 * float(m.w @ m.w)
        assert fm_objective(m, d, cfg) == pytest.approx(want, rel=1e-10)


def _design_as_dataset(X, targets=None):
    m, n = X.shape
    insts = []
    for i in range(m):
        idx = np.nonzero(X[i])[0]
        insts.append(
            SparseInstance(
                idx.astype(np.int64),
                X[i, idx],
                0.0 if targets is None else float(targets[i]),
            )
        )
    return Dataset(tuple(insts), n)


class TestSolveW:
    def test_constant_phi_fixed_point(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(0.5, 2.0, (8, 3))
        d = _design_as_dataset(X)
        phi = np.full(8, 1.75)
        w0, w = solve_w(phi, d, alpha=0.0)
        resid = phi - w0 - X @ w
        assert float(resid @ resid) == pytest.approx(0.0, abs=1e-20)
        assert w0 == pytest.approx(1.75)
        np.testing.assert_allclose(w, 0.0, atol=1e-12)

    def test_huge_alpha_shrinks_to_mean(self):
        # single always-on feature, phi alternating +-1
        X = np.ones((6, 1))
        d = _design_as_dataset(X)
        phi = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
        w0, w = solve_w(phi, d, alpha=1e9)
        assert abs(w[0]) < 1e-6
        assert abs(w0) < 1e-6

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(3)
        X = rng.normal(0, 1, (10, 4))
        phi = rng.normal(0, 1, 10)
        d = _design_as_dataset(X)
        w0, w = solve_w(phi, d, alpha=0.1, tol=1e-14, max_sweeps=5000)
        w0_ref, w_ref = ridge_normal_equations(X, phi, 0.1)
        assert w0 == pytest.approx(w0_ref, abs=1e-6)
        np.testing.assert_allclose(w, w_ref, atol=1e-6)

    def test_objective_non_increasing_vs_warm_start(self):
        rng = np.random.default_rng(4)
        X = rng.normal(0, 1, (12, 5))
        phi = rng.normal(0, 2, 12)
        d = _design_as_dataset(X)
        w_start = rng.normal(0, 1, 5)
        w00 = 0.3

        def obj(w0, w):
            r = phi - w0 - X @ w
            return float(r @ r + 0.05 * (w @ w))

        w0, w = solve_w(phi, d, alpha=0.05, w0=w00, w=w_start)
        assert obj(w0, w) <= obj(w00, w_start) + 1e-12

    def test_unused_feature_with_zero_alpha_untouched(self):
        d = Dataset(
            (SparseInstance(np.array([0]), np.array([1.0]), 0.0),), 2
        )
        w0, w = solve_w(np.array([2.0]), d, alpha=0.0)
        assert w[1] == 0.0  # never updated, stays at the zero start


class TestFmTrain:
    def test_recovers_planted_model(self):
        rng = np.random.default_rng(11)
        n, k = 12, 2
        V_true = rng.normal(0, 1, (k, n))
        w_true = rng.normal(0, 0.5, n)
        m_true = FmModel(0.7, w_true, V_true)
        insts = []
        for _ in range(500):
            x = _random_instance(rng, n, max_nnz=5)
            insts.append(
                SparseInstance(x.indices, x.values, fm_predict(m_true, x))
            )
        train = Dataset(tuple(insts[:400]), n)
        test = Dataset(tuple(insts[400:]), n)
        cfg = TrainConfig(
            alpha=1e-6, k=2, seed=0, max_outer_iters=300, tol=1e-12, init_scale=0.5
        )
        model = fm_train(train, cfg)
        resid = test.targets - score_dataset(model, test)
        assert float(np.sqrt((resid ** 2).mean())) < 0.05

    def test_constant_targets(self):
        rng = np.random.default_rng(12)
        insts = []
        for _ in range(50):
            x = _random_instance(rng, 8, max_nnz=4)
            insts.append(SparseInstance(x.indices, x.values, 2.5))
        d = Dataset(tuple(insts), 8)
        model = fm_train(d, TrainConfig(alpha=0.0, k=3, seed=1, max_outer_iters=50))
        resid = d.targets - score_dataset(model, d)
        assert float(np.sqrt((resid ** 2).mean())) < 1e-3
        assert model.w0 == pytest.approx(2.5, abs=0.05)

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        d = random_dataset(rng, n=10, m=40)
        cfg = TrainConfig(alpha=1e-2, k=4, seed=42, max_outer_iters=10)
        a = fm_train(d, cfg)
        b = fm_train(d, cfg)
        assert a.w0 == b.w0
        assert np.array_equal(a.w, b.w)
        assert np.array_equal(a.V, b.V)

    def test_objective_monotone_and_alpha_grid(self):
        rng = np.random.default_rng(14)
        d = random_dataset(rng, n=10, m=60)
        for alpha in [10.0 ** i for i in range(-4, 3)]:
            seen = []
            cfg = TrainConfig(alpha=alpha, k=3, seed=0, max_outer_iters=15)
            fm_train(d, cfg, on_iter=lambda i, o: seen.append(o))
            diffs = np.diff(seen)
            assert np.all(diffs <= 1e-9 * np.maximum(1.0, np.abs(seen[:-1])))

    def test_embedding_l2_smoke(self):
        rng = np.random.default_rng(15)
        d = random_dataset(rng, n=8, m=30)
        cfg = TrainConfig(alpha=1e-2, k=2, seed=0, max_outer_iters=10, embed_l2=0.5)
        shrunk = fm_train(d, cfg)
        free = fm_train(d, cfg.with_(embed_l2=0.0))
        assert (shrunk.V ** 2).sum() < (free.V ** 2).sum()

    def test_sgd_solver_runs(self):
        rng = np.random.default_rng(16)
        d = random_dataset(rng, n=8, m=40)
        cfg = TrainConfig(alpha=1e-2, k=3, seed=0, max_outer_iters=20, solver="sgd")
        model = fm_train(d, cfg)
        assert np.all(np.isfinite(model.V))

    def test_sgd_divergence_reports_iteration(self):
        rng = np.random.default_rng(17)
        insts = [
            SparseInstance(np.array([0, 1]), np.array([100.0, 100.0]), 1e12)
            for _ in range(10)
        ]
        d = Dataset(tuple(insts), 2)
        cfg = TrainConfig(
            alpha=0.0, k=2, seed=0, max_outer_iters=40, solver="sgd", sgd_lr=10.0
        )
        with np.errstate(all="ignore"), pytest.raises(NumericError, match="iteration"):
            fm_train(d, cfg)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            fm_train(Dataset((), 3), TrainConfig(k=2))


class TestModelIO:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(20)
        m = _random_model(rng, 7, 3)
        p = tmp_path / "model.fm"
        save_fm(m, p)
        loaded = load_fm(p)
        assert loaded.w0 == m.w0
        assert np.array_equal(loaded.w, m.w)
        assert np.array_equal(loaded.V, m.V)
        # a second save of the loaded model is byte-identical
        p2 = tmp_path / "model2.fm"
        save_fm(loaded, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bogus.fm"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="not a real-valued model"):
            load_fm(p)
