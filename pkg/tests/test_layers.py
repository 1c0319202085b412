import numpy as np
import pytest

from conftest import naive_matmul
from mixbalance.layers import (
    BatchNorm, Conv2d, Linear, Module, Sequential, batchnorm_forward, global_avg_pool,
    global_max_pool, kaiming_init, linear_forward,
)
from mixbalance.tensor import ShapeError, Tensor, backward, gradient_check


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(3, 4))
        out = linear_forward(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias_rows(self):
        b = np.array([1.0, -2.0, 3.0])
        out = linear_forward(Tensor(np.ones((2, 5))), Tensor(np.zeros((3, 5))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))

    def test_random_vs_matmul_plus_add(self, rng):
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
        out = linear_forward(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(x, w.T) + b, rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            linear_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_gradient(self, rng):
        err = gradient_check(lambda x, w, b: (linear_forward(x, w, b) ** 2).sum(),
                             [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)])
        assert err < 1e-5


class TestBatchNorm:
    def test_train_mode_normalises_per_channel(self, rng):
        x = rng.normal(3.0, 2.5, size=(6, 3, 4, 4))
        bn = BatchNorm(3, dtype=np.float64)
        out = batchnorm_forward(Tensor(x), bn, "train").data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_eval_with_default_stats_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 2, 2))
        bn = BatchNorm(3, dtype=np.float64)
        out = batchnorm_forward(Tensor(x), bn, "eval").data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-15)
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_running_stats_follow_scalar_ema(self, rng):
        bn = BatchNorm(1, momentum=0.1, dtype=np.float64)
        mean, var = 0.0, 1.0
        for _ in range(4):
            x = rng.normal(2.0, 3.0, size=(5, 1))
            batchnorm_forward(Tensor(x), bn, "train")
            vals = x[:, 0].tolist()
            m = sum(vals) / len(vals)
            v = sum((t - m) ** 2 for t in vals) / (len(vals) - 1)
            mean, var = 0.9 * mean + 0.1 * m, 0.9 * var + 0.1 * v
        assert bn.running_mean[0] == pytest.approx(mean, rel=1e-12)
        assert bn.running_var[0] == pytest.approx(var, rel=1e-12)

    def test_batch_of_one_rejected_in_train_mode(self):
        with pytest.raises(ValueError, match="at least 2"):
            batchnorm_forward(Tensor(np.ones((1, 2))), BatchNorm(2), "train")

    def test_eval_is_pure(self, rng):
        bn = BatchNorm(2, dtype=np.float64)
        bn.set_buffer("running_mean", np.array([0.5, -1.0]))
        bn.set_buffer("running_var", np.array([2.0, 0.25]))
        x = Tensor(rng.normal(size=(3, 2, 2, 2)))
        a = batchnorm_forward(x, bn, "eval").data
        b = batchnorm_forward(x, bn, "eval").data
        assert a.tobytes() == b.tobytes()
        assert bn.running_mean.tolist() == [0.5, -1.0]

    def test_running_stats_receive_no_gradient(self, rng):
        bn = BatchNorm(2, dtype=np.float64)
        backward(bn(Tensor(rng.normal(size=(4, 2)))).sum())
        assert bn.weight.grad is not None
        assert [n for n, _ in bn.named_parameters()] == ["weight", "bias"]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            batchnorm_forward(Tensor(np.ones((2, 2))), BatchNorm(2), "infer")

    @pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3)])
    def test_gradient_train_mode(self, rng, shape):
        bn = BatchNorm(shape[1], dtype=np.float64)

        def f(x, g, b):
            bn.weight, bn.bias = g, b
            y = batchnorm_forward(x, bn, "train")
            return (y * y * Tensor(np.linspace(0.5, 1.5, y.data.size).reshape(y.shape))).sum()

        err = gradient_check(f, [rng.normal(size=shape), rng.normal(size=shape[1]) + 1,
                                 rng.normal(size=shape[1])])
        assert err < 1e-5


class TestKaiming:
    def test_variance_over_many_draws(self):
        w = kaiming_init((100_000,), 9, np.random.default_rng(0), np.float64).data
        assert abs(w.var() / (2 / 9) - 1) < 0.05

    def test_fan_in_two_gives_unit_std(self):
        w = kaiming_init((200_000,), 2, np.random.default_rng(1), np.float64).data
        assert w.std() == pytest.approx(1.0, rel=0.01)

    def test_seed_determinism(self):
        a = kaiming_init((3, 4), 4, np.random.default_rng(5)).data
        b = kaiming_init((3, 4), 4, np.random.default_rng(5)).data
        assert a.tobytes() == b.tobytes()

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            kaiming_init((2,), 0, np.random.default_rng(0))


class TestGlobalPools:
    def test_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), -0.5))
        assert np.all(global_avg_pool(x).data == -0.5)
        assert np.all(global_max_pool(x).data == -0.5)

    def test_small_avg(self):
        x = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert global_avg_pool(x).data.item() == 4.0
        assert global_max_pool(x).data.item() == 7.0

    def test_random_vs_loops(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        avg = np.zeros((2, 3))
        mx = np.full((2, 3), -np.inf)
        for n in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(4):
                        avg[n, c] += x[n, c, i, j] / 16
                        mx[n, c] = max(mx[n, c], x[n, c, i, j])
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, avg, rtol=1e-13)
        np.testing.assert_array_equal(global_max_pool(Tensor(x)).data, mx)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        assert gradient_check(lambda t: (global_avg_pool(t) ** 2).sum(), x) < 1e-5
        assert gradient_check(lambda t: (global_max_pool(t) ** 2).sum(), x) < 1e-5


class TestModule:
    def _net(self):
        rng = np.random.default_rng(0)
        return Sequential(Conv2d(1, 2, 3, rng, pad=1), BatchNorm(2))

    def test_names_are_unique_and_ordered(self):
        names = [n for n, _ in self._net().named_parameters()]
        assert names == ["0.weight", "1.weight", "1.bias"]
        assert all(p.requires_grad for p in self._net().parameters())

    def test_state_dict_round_trip(self):
        b = self._net()
        state = {k: v + 1 for k, v in self._net().state_dict().items()}
        b.load_state_dict(state)
        for k, v in b.state_dict().items():
            np.testing.assert_array_equal(v, np.asarray(state[k]).astype(v.dtype))

    def test_load_rejects_missing_and_misshapen(self):
        net = self._net()
        state = dict(net.state_dict())
        with pytest.raises(KeyError):
            net.load_state_dict({k: v for k, v in state.items() if k != "1.running_var"})
        state["0.weight"] = np.zeros((1, 1, 3, 3))
        with pytest.raises(ShapeError):
            net.load_state_dict(state)

    def test_train_eval_flag_propagates(self):
        net = self._net().eval()
        assert not any(m.training for m in net.modules())

    def test_conv_bias_absent_by_default(self):
        conv = Conv2d(2, 3, 3, np.random.default_rng(0))
        assert conv.bias is None and conv.num_parameters() == 2 * 3 * 9

    def test_linear_parameter_count(self):
        assert Linear(5, 3, np.random.default_rng(0)).num_parameters() == 18
        assert isinstance(Linear(5, 3, np.random.default_rng(0)), Module)
