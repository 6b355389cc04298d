import numpy as np
import pytest

from dmm import autodiff as ad
from dmm import nn
from dmm.core import RngStream


def make_net(rng, in_dim=3, out_dim=2, hidden=(8, 8), cond=0):
    net = nn.ScoreNet(in_dim, out_dim, hidden=hidden, time_embed_dim=8,
                      cond_dim=cond, cond_embed_dim=4 if cond else 0)
    return net, net.init_params(rng)


class TestForward:
    def test_zero_weights_zero_output(self):
        net, params = make_net(RngStream(0))
        params = {k: np.zeros_like(v) for k, v in params.items()}
        out = net.apply(params, np.ones(3), 0.5)
        assert np.array_equal(out, np.zeros(2))

    def test_identity_linear_layer(self):
        net = nn.ScoreNet(3, 3, hidden=(), time_embed_dim=0)
        params = {"w0": np.eye(3), "b0": np.zeros(3)}
        x = np.array([1.0, -2.0, 0.25])
        assert np.array_equal(net.apply(params, x, 0.0), x)

    def test_deterministic(self):
        net, params = make_net(RngStream(1))
        x = np.linspace(-1, 1, 3)
        a = net.apply(params, x, 0.3)
        b = net.apply(params, x, 0.3)
        assert np.array_equal(a, b)

    def test_batch_matches_loop(self):
        net, params = make_net(RngStream(2))
        xs = np.random.default_rng(3).normal(size=(5, 3))
        ts = np.linspace(0.1, 0.9, 5)
        batch = net.apply(params, xs, ts)
        for i in range(5):
            assert np.allclose(batch[i], net.apply(params, xs[i], ts[i]), atol=1e-14)

    def test_conditional_path(self):
        net, params = make_net(RngStream(4), cond=6)
        x = np.zeros(3)
        c1, c2 = np.zeros(6), np.ones(6)
        assert not np.allclose(net.apply(params, x, 0.5, c1),
                               net.apply(params, x, 0.5, c2))
        with pytest.raises(ValueError):
            net.apply(params, x, 0.5)

    def test_shape_mismatch(self):
        net, params = make_net(RngStream(5))
        with pytest.raises(ValueError):
            net.apply(params, np.ones(4), 0.5)

    def test_tensor_input_agrees_with_numpy(self):
        net, params = make_net(RngStream(6))
        x = np.random.default_rng(7).normal(size=(4, 3))
        out_np = net.apply(params, x, 0.4)
        out_t = net.apply({k: ad.Tensor(v) for k, v in params.items()}, ad.Tensor(x), 0.4)
        assert np.allclose(out_np, out_t.data, atol=1e-15)


class TestEmbedding:
    def test_shape_and_range(self):
        emb = nn.sinusoidal_embedding([0.0, 0.5, 1.0], 32)
        assert emb.shape == (3, 32)
        assert np.all(np.abs(emb) <= 1.0)

    def test_distinct_times_distinct_embeddings(self):
        emb = nn.sinusoidal_embedding([0.1, 0.2], 64)
        assert not np.allclose(emb[0], emb[1])


class TestLossGradient:
    @staticmethod
    def quadratic_loss(net, x, t):
        def fn(params, batch):
            out = net.apply(params, ad.Tensor(batch), t)
            return (out * out).sum() * 0.5
        return fn

    def test_linear_net_closed_form(self):
        # loss = ||x W||^2 / 2 so dL/dW = x^T x W
        net = nn.ScoreNet(3, 2, hidden=(), time_embed_dim=0)
        rng = np.random.default_rng(8)
        W = rng.normal(size=(3, 2))
        params = {"w0": W, "b0": np.zeros(2)}
        x = rng.normal(size=(5, 3))
        _, grads = nn.loss_gradient(net, params, self.quadratic_loss(net, x, 0.0), x)
        assert np.allclose(grads["w0"], x.T @ x @ W, atol=1e-12)

    def test_constant_loss_zero_gradient(self):
        net, params = make_net(RngStream(9))
        _, grads = nn.loss_gradient(net, params, lambda p, b: ad.Tensor(3.0), None)
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_50_random_nets_vs_finite_differences(self):
        rng = np.random.default_rng(10)
        worst = 0.0
        for trial in range(50):
            in_dim = int(rng.integers(2, 6))
            out_dim = int(rng.integers(1, 4))
            widths = tuple(int(rng.integers(4, 33)) for _ in range(int(rng.integers(1, 3))))
            net = nn.ScoreNet(in_dim, out_dim, hidden=widths, time_embed_dim=8,
                              activation="silu" if trial % 2 == 0 else "tanh")
            params = net.init_params(RngStream(trial, 1))
            x = rng.normal(size=(4, in_dim))
            t = rng.uniform(0.1, 0.9)

            def loss_val(p):
                out = net.apply(p, x, t)
                return 0.5 * float(np.sum(np.asarray(out if not isinstance(out, ad.Tensor) else out.data) ** 2))

            def loss_fn(p, batch):
                out = net.apply(p, ad.Tensor(x), t)
                return (out * out).sum() * 0.5

            _, grads = nn.loss_gradient(net, params, loss_fn, None)
            h = 1e-5
            for k, g in grads.items():
                flat = params[k].ravel()
                picks = rng.choice(flat.size, size=min(5, flat.size), replace=False)
                for j in picks:
                    orig = flat[j]
                    flat[j] = orig + h
                    fp = loss_val(params)
                    flat[j] = orig - h
                    fm = loss_val(params)
                    flat[j] = orig
                    num = (fp - fm) / (2 * h)
                    rel = abs(g.ravel()[j] - num) / max(abs(num), 1.0)
                    worst = max(worst, rel)
        assert worst <= 1e-5


class TestAdam:
    def test_zero_gradient_no_move(self):
        params = {"w": np.ones((2, 2))}
        state = nn.AdamState(params, learning_rate=0.1)
        nn.adam_step(state, params, {"w": np.zeros((2, 2))})
        assert np.array_equal(params["w"], np.ones((2, 2)))
        assert state.step_count == 1

    def test_constant_gradient_moves_by_lr_sign(self):
        params = {"w": np.zeros(3)}
        state = nn.AdamState(params, learning_rate=0.01)
        g = np.array([1.0, -2.0, 0.5])
        for _ in range(200):
            nn.adam_step(state, params, {"w": g})
        before = params["w"].copy()
        nn.adam_step(state, params, {"w": g})
        step = params["w"] - before
        assert np.allclose(step, -0.01 * np.sign(g), rtol=1e-3)

    def test_lr_zero_no_move(self):
        params = {"w": np.ones(4)}
        state = nn.AdamState(params, learning_rate=0.0)
        nn.adam_step(state, params, {"w": np.ones(4)})
        assert np.array_equal(params["w"], np.ones(4))

    def test_nonfinite_gradient_raises(self):
        params = {"w": np.ones(2)}
        state = nn.AdamState(params)
        with pytest.raises(FloatingPointError):
            nn.adam_step(state, params, {"w": np.array([1.0, np.nan])})


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        net, params = make_net(RngStream(11), cond=5)
        state = nn.AdamState(params, learning_rate=3e-4)
        _, grads = nn.loss_gradient(
            net, params,
            lambda p, b: (net.apply(p, ad.Tensor(np.ones((2, 3))), 0.3,
                                    ad.Tensor(np.ones((2, 5)))) ** 2.0).sum(),
            None)
        nn.adam_step(state, params, grads)
        path = tmp_path / "ckpt.json"
        nn.save_checkpoint(path, net, params, adam=state, rng=RngStream(7, 3))
        net2, params2, adam2, doc = nn.load_checkpoint(path)
        assert net2.arch() == net.arch()
        for k in params:
            assert np.array_equal(params[k], params2[k])
            assert np.array_equal(state.first_moment[k], adam2.first_moment[k])
            assert np.array_equal(state.second_moment[k], adam2.second_moment[k])
        assert adam2.step_count == 1
        assert doc["rng"] == {"seed": 7, "stream_id": 3}

    def test_training_determinism(self):
        def train(seed):
            net, params = make_net(RngStream(seed))
            state = nn.AdamState(params, learning_rate=1e-2)
            data_rng = RngStream(seed, 2).generator
            for _ in range(20):
                x = data_rng.normal(size=(8, 3))
                def loss_fn(p, b):
                    out = net.apply(p, ad.Tensor(b), 0.5)
                    return (out * out).mean()
                _, grads = nn.loss_gradient(net, params, loss_fn, x)
                nn.adam_step(state, params, grads)
            return params

        a, b = train(123), train(123)
        for k in a:
            assert np.array_equal(a[k], b[k])
