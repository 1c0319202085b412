import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixbalance.optim import Adam, AdamState, NonFiniteGradientError, adam_step, lr_at_epoch
from mixbalance.tensor import Tensor


def scalar_adam(x, grad_fn, lr, steps, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam on a Python float."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x) + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def param(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


class TestAdamStep:
    def test_zero_grad_no_decay_leaves_params(self):
        p = param(1.25)
        state = AdamState()
        adam_step({"p": p}, {"p": np.zeros(1)}, state, 1e-3)
        assert p.data[0] == 1.25 and state.t == 1

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
    def test_first_step_is_lr_times_sign(self, g):
        p = param(0.0)
        adam_step({"p": p}, {"p": np.array([g])}, AdamState(), 1e-2)
        assert p.data[0] == pytest.approx(-1e-2 * math.copysign(1, g), rel=1e-4)

    @pytest.mark.parametrize("wd", [0.0, 1e-4, 0.1])
    def test_five_steps_on_quadratic_vs_scalar_oracle(self, wd):
        # f(x) = 0.5 * a * (x - c)^2
        a, c, lr = 3.0, 0.7, 0.05
        expected = scalar_adam(-1.0, lambda x: a * (x - c), lr, 5, wd)
        p, state = param(-1.0), AdamState()
        for want in expected:
            adam_step({"p": p}, {"p": a * (p.data - c)}, state, lr, wd)
            assert p.data[0] == pytest.approx(want, rel=1e-14, abs=1e-15)
        assert state.t == 5

    def test_non_finite_gradient_names_parameter_and_moves_nothing(self):
        a, b = param(1.0), param(2.0)
        state = AdamState()
        with pytest.raises(NonFiniteGradientError) as info:
            adam_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.array([np.inf])}, state, 0.1)
        assert info.value.name == "b"
        assert a.data[0] == 1.0 and b.data[0] == 2.0 and state.t == 0

    def test_second_moment_non_negative(self, rng):
        p, state = Tensor(rng.normal(size=5), requires_grad=True), AdamState()
        for _ in range(4):
            adam_step({"p": p}, {"p": rng.normal(size=5)}, state, 1e-3)
        assert np.all(state.v["p"] >= 0)

    def test_f32_params_stay_f32(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        adam_step({"p": p}, {"p": np.ones(3, dtype=np.float32)}, AdamState(), 1e-3, 1e-4)
        assert p.dtype == np.float32


class TestAdamGroups:
    def test_zero_lr_group_is_frozen(self):
        a, b = param(1.0), param(1.0)
        opt = Adam([{"params": {"a": a}, "lr": 0.0}, {"params": {"b": b}, "lr": 0.1}])
        for _ in range(3):
            a.grad, b.grad = np.ones(1), np.ones(1)
            opt.step()
        assert a.data[0] == 1.0 and b.data[0] < 1.0

    def test_set_epoch_decays_each_group(self):
        opt = Adam([{"params": {}, "lr": 1e-4}, {"params": {}, "lr": 5e-4}])
        opt.set_epoch(2, 0.9)
        assert [g["lr"] for g in opt.groups] == [lr_at_epoch(1e-4, 0.9, 2), lr_at_epoch(5e-4, 0.9, 2)]

    def test_zero_grad(self):
        a = param(1.0)
        a.grad = np.ones(1)
        Adam([{"params": {"a": a}, "lr": 1.0}]).zero_grad()
        assert a.grad is None


class TestSchedule:
    def test_anchor_values(self):
        assert lr_at_epoch(1e-4, 0.9, 0) == 1e-4
        assert lr_at_epoch(1e-4, 0.9, 1) == pytest.approx(9e-5, rel=1e-15)
        assert lr_at_epoch(1e-4, 0.9, 2) == pytest.approx(8.1e-5, rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(base=st.floats(1e-6, 1.0), gamma=st.floats(0.01, 1.0), e=st.integers(0, 200))
    def test_non_increasing(self, base, gamma, e):
        assert lr_at_epoch(base, gamma, e + 1) <= lr_at_epoch(base, gamma, e)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(1e-3, 0.9, -1)
