"""AdamW and EMA update contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossband.autodiff import ParameterError, Tensor
from crossband.optim import AdamWState, TrainingError, adamw_step, ema_update


def make_param(value, grad=None):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    if grad is not None:
        p.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestAdamW:
    def test_zero_grad_zero_wd_is_identity(self):
        p = make_param([1.0, -2.0, 3.0], grad=[0.0, 0.0, 0.0])
        state = AdamWState(weight_decay=0.0)
        before = p.data.copy()
        adamw_step({"p": p}, state, lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert state.t == 1

    def test_first_step_is_almost_sign_step(self):
        # closed form: m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
        g = np.array([0.3, -1.7, 2.0])
        p = make_param(np.zeros(3), grad=g)
        lr = 0.01
        state = AdamWState(weight_decay=0.0)
        adamw_step({"p": p}, state, lr=lr)
        expected = -lr * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_lr_zero_keeps_params_but_updates_moments(self):
        p = make_param([1.0], grad=[2.0])
        state = AdamWState()
        adamw_step({"p": p}, state, lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0])
        assert state.m["p"][0] != 0.0
        assert state.v["p"][0] != 0.0

    def test_non_finite_gradient_names_parameter(self):
        p = make_param([1.0], grad=[np.nan])
        with pytest.raises(TrainingError, match="theta"):
            adamw_step({"theta": p}, AdamWState(), lr=0.1)

    def test_negative_lr_rejected(self):
        p = make_param([1.0], grad=[1.0])
        with pytest.raises(ParameterError):
            adamw_step({"p": p}, AdamWState(), lr=-0.1)

    def test_decoupled_weight_decay_shrinks_params(self):
        p = make_param([10.0], grad=[0.0])
        state = AdamWState(weight_decay=0.1)
        adamw_step({"p": p}, state, lr=0.01)
        np.testing.assert_allclose(p.data, [10.0 - 0.01 * 0.1 * 10.0])

    def test_step_counter_strictly_increments(self):
        p = make_param([1.0], grad=[1.0])
        state = AdamWState()
        for expected in (1, 2, 3):
            adamw_step({"p": p}, state, lr=0.001)
            assert state.t == expected
            p.grad = np.array([1.0])


class TestEMA:
    def test_momentum_one_keeps_teacher(self):
        t = {"w": np.array([1.0, 2.0])}
        ema_update(t, {"w": make_param([5.0, 5.0])}, momentum=1.0)
        np.testing.assert_array_equal(t["w"], [1.0, 2.0])

    def test_momentum_zero_copies_student(self):
        t = {"w": np.array([1.0, 2.0])}
        ema_update(t, {"w": make_param([5.0, 6.0])}, momentum=0.0)
        np.testing.assert_array_equal(t["w"], [5.0, 6.0])

    def test_halfway(self):
        t = {"w": np.array([0.0])}
        ema_update(t, {"w": make_param([1.0])}, momentum=0.5)
        np.testing.assert_array_equal(t["w"], [0.5])

    def test_momentum_out_of_range_rejected(self):
        with pytest.raises(ParameterError):
            ema_update({"w": np.zeros(1)}, {"w": make_param([1.0])}, momentum=1.5)

    @given(m=st.floats(min_value=0.0, max_value=1.0), s=st.floats(-10, 10), t0=st.floats(-10, 10))
    @settings(max_examples=50, deadline=None)
    def test_twice_with_m_equals_once_with_m_squared(self, m, s, t0):
        # affine in teacher when the student is fixed
        student = {"w": make_param([s])}
        twice = {"w": np.array([t0])}
        ema_update(twice, student, momentum=m)
        ema_update(twice, student, momentum=m)
        once = {"w": np.array([t0])}
        ema_update(once, student, momentum=m * m)
        np.testing.assert_allclose(twice["w"], once["w"], rtol=1e-12, atol=1e-12)
