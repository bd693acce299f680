import numpy as np
import pytest

from trajflow import nn
from trajflow.nn import Parameter


def rng(seed=0):
    return np.random.default_rng(seed)


def weights(y, seed=5):
    # random projection so every output entry contributes to the scalar loss
    return rng(seed).normal(size=y.shape)


class TestOps:
    def test_dense_examples(self):
        x = np.array([[1.0, 2.0]])
        y = nn.dense(x, Parameter(np.eye(2)), Parameter(np.zeros(2)))
        assert np.array_equal(y.data, x)
        y = nn.dense(x, Parameter([[1.0, 1.0], [0.0, 1.0]]), Parameter([0.0, 0.0]))
        assert np.array_equal(y.data, [[3.0, 2.0]])

    def test_dense_shape_errors(self):
        with pytest.raises(ValueError):
            nn.dense(np.ones((1, 3)), Parameter(np.ones((2, 2))))
        with pytest.raises(ValueError):
            nn.dense(np.ones((1, 2)), Parameter(np.ones((2, 2))), Parameter(np.ones(3)))

    def test_silu_layer_norm_embedding_values(self):
        assert nn.silu(np.zeros(3)).data.tolist() == [0.0, 0.0, 0.0]
        beta = Parameter([0.5, -1.0, 2.0])
        out = nn.layer_norm(np.full((2, 3), 7.0), Parameter(np.ones(3)), beta)
        assert np.allclose(out.data, beta.data, atol=1e-12)
        table = Parameter(rng().normal(size=(4, 3)))
        assert np.array_equal(nn.embedding(table, [2, 0]).data, table.data[[2, 0]])
        with pytest.raises(ValueError):
            nn.embedding(table, [4])
        with pytest.raises(ValueError):
            nn.embedding(table, [-1])

    def test_layer_norm_standardizes(self):
        x = rng(1).normal(3.0, 5.0, size=(6, 16))
        y = nn.layer_norm(x, Parameter(np.ones(16)), Parameter(np.zeros(16))).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        # the eps in the denominator shrinks the variance slightly below one
        var = x.var(axis=-1)
        assert np.allclose(y.var(axis=-1), var / (var + 1e-5), atol=1e-12)

    @pytest.mark.parametrize("op", ["dense", "silu", "tanh", "layer_norm", "embedding", "concat_cols", "square"])
    def test_gradient_check(self, op):
        r = rng(2)
        x = Parameter(r.normal(size=(4, 5)))
        W = Parameter(r.normal(size=(3, 5)))
        b = Parameter(r.normal(size=3))
        gamma = Parameter(r.normal(1.0, 0.3, size=5))
        beta = Parameter(r.normal(size=5))
        table = Parameter(r.normal(size=(6, 5)))
        fns = {
            "dense": (lambda: nn.dense(x, W, b), [x, W, b]),
            "silu": (lambda: nn.silu(x), [x]),
            "tanh": (lambda: nn.tanh(x), [x]),
            "layer_norm": (lambda: nn.layer_norm(x, gamma, beta), [x, gamma, beta]),
            "embedding": (lambda: nn.embedding(table, [1, 3, 3, 0]), [table]),
            "concat_cols": (lambda: nn.cols(nn.concat([x, nn.silu(x)]), 3, 8), [x]),
            "square": (lambda: nn.square(x), [x]),
        }
        fn, params = fns[op]
        proj = weights(fn().data)
        err = nn.gradient_check(lambda: nn.total(nn.mul(fn(), proj)), params, h=1e-5, max_entries=None)
        assert err < 1e-4

    def test_linear_network_exact(self):
        r = rng(3)
        W, b = Parameter(r.normal(size=(3, 4))), Parameter(r.normal(size=3))
        x = r.normal(size=(2, 4))
        proj = r.normal(size=(2, 3))
        err = nn.gradient_check(lambda: nn.total(nn.mul(nn.dense(x, W, b), proj)), [W, b], max_entries=None)
        assert err < 1e-7

    def test_corrupted_backward_detected(self, monkeypatch):
        real_silu = nn.silu

        def bad_silu(x):
            out = real_silu(x)
            good = out.backward_fn
            out.backward_fn = lambda g: tuple(0.5 * gi for gi in good(g))
            return out

        x = Parameter(rng(4).normal(size=(3, 4)))
        proj = rng(6).normal(size=(3, 4))
        err = nn.gradient_check(lambda: nn.total(nn.mul(bad_silu(x), proj)), [x], max_entries=None)
        assert err > 1e-2

    def test_broadcast_gradients(self):
        a = Parameter(rng(7).normal(size=(3, 4)))
        b = Parameter(rng(8).normal(size=4))
        proj = rng(9).normal(size=(3, 4))
        err = nn.gradient_check(lambda: nn.total(nn.mul(nn.mul(a + b, a - 2.0 * b), proj)), [a, b],
                                max_entries=None)
        assert err < 1e-6

    def test_shared_node_accumulates(self):
        x = Parameter([2.0])
        y = x * x + x
        nn.total(y).backward()
        assert x.grad.tolist() == [5.0]

    def test_no_grad(self):
        x = Parameter([1.0, 2.0])
        with nn.no_grad():
            y = nn.silu(x)
        assert y.parents == () and y.backward_fn is None
        assert nn.silu(x).parents

    def test_backward_needs_scalar(self):
        with pytest.raises(ValueError):
            nn.silu(Parameter([1.0, 2.0])).backward()


class TestModules:
    def test_dense_init_bounds(self):
        d = nn.Dense(30, 20, rng())
        lim = np.sqrt(6 / 50)
        assert np.all(np.abs(d.W.data) <= lim) and np.abs(d.W.data).max() > 0.9 * lim
        assert np.all(d.b.data == 0)
        assert nn.Dense(3, 2, rng(), bias=False).b is None

    def test_embedding_init(self):
        e = nn.Embedding(500, 40, rng())
        assert abs(e.table.data.std() - 0.02) < 1e-3

    def test_state_dict_round_trip(self):
        class Net(nn.Module):
            def __init__(self, r):
                self.a = nn.Dense(3, 4, r)
                self.blocks = [nn.Dense(4, 4, r), nn.LayerNorm(4)]

        src, dst = Net(rng(1)), Net(rng(2))
        names = [k for k, _ in src.named_parameters()]
        assert names == ["a.W", "a.b", "blocks.0.W", "blocks.0.b", "blocks.1.gamma", "blocks.1.beta"]
        dst.load_state_dict(src.state_dict())
        for (_, p), (_, q) in zip(src.named_parameters(), dst.named_parameters()):
            assert np.array_equal(p.data, q.data)
        bad = src.state_dict()
        bad["a.W"] = np.zeros((2, 2))
        with pytest.raises(ValueError):
            dst.load_state_dict(bad)
        del bad["a.W"]
        with pytest.raises(KeyError):
            dst.load_state_dict(bad)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = Parameter(rng().normal(size=5))
        before = p.data.copy()
        opt = nn.Adam([("p", p)], lr=1e-2)
        for _ in range(10):
            p.grad = np.zeros(5)
            opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_is_lr_sign(self):
        p = Parameter(np.zeros(4))
        opt = nn.Adam([("p", p)], lr=1e-3)
        g = np.array([3.0, -0.5, 1e-2, -200.0])
        p.grad = g.copy()
        opt.step()
        # m_hat = g, v_hat = g^2 at step one
        assert np.allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        assert p.grad is None

    def test_moments_decay_geometrically(self):
        p = Parameter(np.zeros(1))
        opt = nn.Adam([("p", p)])
        p.grad = np.array([2.0])
        opt.step()
        m0, v0 = opt.m["p"].copy(), opt.v["p"].copy()
        for k in range(1, 5):
            p.grad = np.zeros(1)
            opt.step()
            assert opt.m["p"] == pytest.approx(m0 * 0.9 ** k, rel=1e-12)
            assert opt.v["p"] == pytest.approx(v0 * 0.999 ** k, rel=1e-12)
        assert np.all(opt.v["p"] >= 0)

    def test_quadratic_bowl(self):
        x = Parameter([1.0])
        opt = nn.Adam([("x", x)], lr=1e-2)
        for _ in range(500):
            nn.square(x).backward()
            opt.step()
        assert abs(x.data[0]) < 1e-3

    def test_non_finite_gradient_aborts(self):
        p, q = Parameter(np.ones(2)), Parameter(np.ones(2))
        opt = nn.Adam([("good", p), ("enc.bad", q)])
        p.grad = np.ones(2)
        q.grad = np.array([1.0, np.nan])
        with pytest.raises(nn.TrainingAbort, match="enc.bad"):
            opt.step()
        assert np.array_equal(p.data, np.ones(2)) and opt.step_count == 0

    def test_state_round_trip(self):
        p = Parameter(np.ones(3))
        opt = nn.Adam([("p", p)])
        p.grad = np.arange(3.0)
        opt.step()
        other = nn.Adam([("p", Parameter(np.ones(3)))])
        other.load_state_dict(opt.state_dict(), opt.step_count)
        assert np.array_equal(other.m["p"], opt.m["p"]) and other.step_count == 1


class TestSchedulers:
    def sched(self, lr=1e-4):
        return nn.PlateauScheduler(nn.Adam([], lr=lr))

    def test_improving_stream(self):
        s = self.sched()
        for i in range(1000):
            s.step(1.0 - 1e-5 * i)
        assert s.optimizer.lr == 1e-4

    def test_flat_201_halves_once(self):
        s = self.sched()
        lrs = [s.step(1.0) for _ in range(201)]
        assert lrs[-2] == 1e-4 and lrs[-1] == 5e-5

    def test_flat_1000_counts_halvings(self):
        s = self.sched()
        for _ in range(1000):
            s.step(1.0)
        assert s.optimizer.lr == 1e-4 / 16

    def test_flat_1000_clips_at_min(self):
        s = self.sched(lr=1e-6)
        for _ in range(1000):
            s.step(1.0)
        assert s.optimizer.lr == 1e-7

    def test_sub_threshold_gain_is_flat(self):
        s = self.sched()
        for i in range(201):
            s.step(1.0 - 5e-7 * (i % 2))
        assert s.optimizer.lr == 5e-5

    def test_early_stopping(self):
        es = nn.EarlyStopping(patience=5000, min_delta=1e-6)
        assert not es.update(1.0, 0)
        assert not es.update(0.5, 100)
        assert not es.update(0.5, 5099)
        assert es.update(0.5 - 1e-7, 5100)
        assert es.best == 0.5 and es.best_step == 100


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"w": rng().normal(size=(3, 2)), "i": np.arange(4)}
        path = tmp_path / "c.npz"
        nn.save_checkpoint(path, {"architecture_hash": "abc", "step": 7}, arrays)
        header, back = nn.load_checkpoint(path, expect_hash="abc")
        assert header["step"] == 7 and header["format_version"] == nn.FORMAT_VERSION
        assert all(np.array_equal(arrays[k], back[k]) for k in arrays)

    def test_rejects(self, tmp_path):
        path = tmp_path / "c.npz"
        nn.save_checkpoint(path, {"architecture_hash": "abc"}, {"w": np.ones(2)})
        with pytest.raises(nn.CheckpointError, match="hash"):
            nn.load_checkpoint(path, expect_hash="def")
        junk = tmp_path / "junk.npz"
        junk.write_bytes(b"not a checkpoint")
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(junk)
        bare = tmp_path / "bare.npz"
        np.savez(bare, w=np.ones(2))
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(bare)

    def test_architecture_hash_sensitive(self):
        a = nn.architecture_hash({"K": 10}, {"w": (3, 2)})
        assert a == nn.architecture_hash({"K": 10}, {"w": (3, 2)})
        assert a != nn.architecture_hash({"K": 10}, {"w": (2, 3)})
        assert a != nn.architecture_hash({"K": 11}, {"w": (3, 2)})
