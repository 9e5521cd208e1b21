import numpy as np
import pytest

from ogclab.data import make_blobs
from ogclab.losscore import softmax
from ogclab.model import (
    LrSchedule,
    MlpModel,
    OptimizerState,
    backward,
    forward,
    global_norm,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


def random_model(dims=(3, 5, 4), seed=0):
    m = MlpModel(list(dims), seed=seed)
    rng = np.random.default_rng(seed + 1)
    m.biases = [rng.normal(0, 0.5, b.shape) for b in m.biases]
    return m


class TestForward:
    def test_zero_model(self):
        m = MlpModel([3, 4, 2], [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
        np.testing.assert_array_equal(forward(m, [1.0, 2.0, 3.0]), [0.0, 0.0])

    def test_linear_column(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        b = np.array([0.1, 0.2, 0.3])
        m = MlpModel([2, 3], [W], [b])
        np.testing.assert_allclose(forward(m, [1.0, 0.0]), W[:, 0] + b)

    def test_softmax_sums_to_one(self):
        p = softmax(forward(random_model(), np.random.default_rng(0).normal(size=(10, 3))))
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            forward(random_model(), [np.nan, 0, 0])

    def test_rejects_wrong_dim(self):
        with pytest.raises(ValueError):
            forward(random_model(), [0.0, 0.0])

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            MlpModel([2, 3], [np.zeros((2, 3))], [np.zeros(3)])


class TestBackward:
    def test_zero_upstream(self):
        m = random_model()
        for g in backward(m, np.ones((2, 3)), np.zeros((2, 4))):
            assert not g.any()

    def test_linear_outer_product(self):
        m = MlpModel([3, 2], seed=1)
        x, g = np.array([1.0, -2.0, 0.5]), np.array([0.3, -0.7])
        gw, gb = backward(m, x, g)
        np.testing.assert_allclose(gw, np.outer(g, x))
        np.testing.assert_allclose(gb, g)

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        m = random_model((3, 6, 5, 4), seed=2)
        X = rng.normal(size=(7, 3))
        G = rng.normal(size=(7, 4))

        def objective(model):
            return float(np.sum(forward(model, X) * G))

        grads = backward(m, X, G)
        h = 1e-6
        num, ana = [], []
        for p, g in zip(m.params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = objective(m)
                p[idx] = old - h
                down = objective(m)
                p[idx] = old
                num.append((up - down) / (2 * h))
                ana.append(g[idx])
        num, ana = np.array(num), np.array(ana)
        assert np.linalg.norm(num - ana) / np.linalg.norm(num) <= 1e-5


class TestSgd:
    def test_plain_step(self):
        m = random_model()
        before = [p.copy() for p in m.params]
        grads = [np.full_like(p, 0.01) for p in m.params]
        sgd_step(m, OptimizerState(lr=0.5, momentum=0.0, weight_decay=0.0), grads)
        for b, a, g in zip(before, m.params, grads):
            np.testing.assert_allclose(a, b - 0.5 * g)

    def test_clip_scales_to_one_tenth(self):
        m = MlpModel([1, 1], [np.zeros((1, 1))], [np.zeros(1)])
        grads = [np.array([[30.0]]), np.array([40.0])]  # norm 50
        sgd_step(m, OptimizerState(lr=1.0, momentum=0.0, weight_decay=0.0, param_clip=5.0), grads)
        np.testing.assert_allclose(m.weights[0], [[-3.0]])
        np.testing.assert_allclose(m.biases[0], [-4.0])

    def test_post_clip_norm(self):
        rng = np.random.default_rng(0)
        m = random_model()
        opt = OptimizerState(lr=1.0, momentum=0.0, weight_decay=0.0, param_clip=5.0)
        for _ in range(20):
            before = [p.copy() for p in m.params]
            grads = [rng.normal(0, rng.uniform(0.1, 30), p.shape) for p in m.params]
            sgd_step(m, opt, grads)
            applied = [b - a for b, a in zip(before, m.params)]
            assert global_norm(applied) <= 5.0 + 1e-9

    def test_momentum_and_decay(self):
        m = MlpModel([1, 1], [np.array([[2.0]])], [np.array([0.0])])
        opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.5, param_clip=100.0)
        g = [np.array([[1.0]]), np.array([0.0])]
        sgd_step(m, opt, g)
        # buf = 1 + 0.5 * 2 = 2; w = 2 - 0.2
        assert m.weights[0][0, 0] == pytest.approx(1.8)
        sgd_step(m, opt, g)
        # buf = 0.9 * 2 + 1 + 0.5 * 1.8 = 3.7
        assert m.weights[0][0, 0] == pytest.approx(1.8 - 0.37)

    def test_non_finite_aborts(self):
        m = random_model()
        before = [p.copy() for p in m.params]
        grads = [np.zeros_like(p) for p in m.params]
        grads[0][0, 0] = np.inf
        with pytest.raises(FloatingPointError):
            sgd_step(m, OptimizerState(), grads)
        for b, a in zip(before, m.params):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(random_model(), OptimizerState(), [np.zeros(1)])

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(momentum=1.0), dict(param_clip=0.0)])
    def test_optimizer_validation(self, kw):
        with pytest.raises(ValueError):
            OptimizerState(**kw)

    def test_identical_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(0)
            m = MlpModel([2, 8, 2], seed=3)
            opt = OptimizerState()
            for _ in range(30):
                X = rng.normal(size=(16, 2))
                sgd_step(m, opt, backward(m, X, rng.normal(size=(16, 2))))
            return m

        a, b = run(), run()
        for p, q in zip(a.params, b.params):
            assert p.tobytes() == q.tobytes()


def test_separable_blobs_sanity():
    X, y = make_blobs(400, 2, overlap=0.15, seed=0)
    m = MlpModel([2, 16, 2], seed=0)
    opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
    rng = np.random.default_rng(0)
    for epoch in range(500):
        perm = rng.permutation(len(y))
        for s in range(0, len(y), 32):
            idx = perm[s : s + 32]
            P = softmax(forward(m, X[idx]))
            G = (P - np.eye(2)[y[idx]]) / len(idx)
            sgd_step(m, opt, backward(m, X[idx], G))
        if np.mean(forward(m, X).argmax(axis=1) == y) >= 0.99:
            break
    assert np.mean(forward(m, X).argmax(axis=1) == y) >= 0.99
    assert epoch < 500


class TestLrSchedule:
    def test_milestones(self):
        s = LrSchedule(0.1, 0.1, (50, 100))
        assert s.lr_at(0) == 0.1
        assert s.lr_at(50) == pytest.approx(0.01)
        assert s.lr_at(120) == pytest.approx(0.001)

    def test_increasing(self):
        with pytest.raises(ValueError):
            LrSchedule(0.1, 0.1, (50, 50))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = random_model((3, 7, 2), seed=5)
        path = tmp_path / "m.ogcm"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.layer_dims == m.layer_dims
        for p, q in zip(m.params, back.params):
            assert p.tobytes() == q.tobytes()

    def test_layout(self, tmp_path):
        m = MlpModel([1, 1], [np.array([[1.5]])], [np.array([-2.0])])
        path = tmp_path / "m.ogcm"
        save_checkpoint(m, path)
        raw = path.read_bytes()
        expected = b"OGCM" + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") * 2
        expected += np.array([1.5, -2.0], dtype="<f8").tobytes()
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        m = random_model()
        path = tmp_path / "m.ogcm"
        save_checkpoint(m, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
