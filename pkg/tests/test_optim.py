import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookalign import optim
from lookalign.nn import init_params
from lookalign.optim import SgdConfig, epoch_tick, init_state, reset, sgd_step
from lookalign.tensor import DimensionError, SeededRng


@pytest.fixture
def theta():
    return init_params(SeededRng(0))


def const_grads(theta, value=1.0):
    return {k: np.full_like(v, value) for k, v in theta.tensors().items()}


def snapshot(theta):
    return {k: v.copy() for k, v in theta.tensors().items()}


def test_zero_grad_fixed_point(theta):
    cfg = SgdConfig(initial_lr=0.1, weight_decay=0.0)
    state = init_state(theta, cfg)
    before = snapshot(theta)
    sgd_step(theta, const_grads(theta, 0.0), state, cfg)
    for k, v in theta.tensors().items():
        np.testing.assert_array_equal(v, before[k])


def test_first_step_is_plain_sgd(theta):
    cfg = SgdConfig(initial_lr=0.05, weight_decay=0.0)
    state = init_state(theta, cfg)
    before = snapshot(theta)
    grads = {k: SeededRng(1).child(k).normal(v.shape) for k, v in theta.tensors().items()}
    sgd_step(theta, grads, state, cfg)
    for k, v in theta.tensors().items():
        np.testing.assert_allclose(v, before[k] - 0.05 * grads[k], rtol=0, atol=1e-15)


def test_two_steps_unrolled(theta):
    # v1 = g, v2 = m*g + g  =>  theta2 = theta0 - lr*g*(2 + m)
    cfg = SgdConfig(initial_lr=0.01, momentum=0.98, weight_decay=0.0)
    state = init_state(theta, cfg)
    before = snapshot(theta)
    g = const_grads(theta, 0.3)
    sgd_step(theta, g, state, cfg)
    sgd_step(theta, g, state, cfg)
    for k, v in theta.tensors().items():
        np.testing.assert_allclose(v, before[k] - 0.01 * 0.3 * (2 + 0.98), rtol=0, atol=1e-14)


def test_weight_decay_applies_to_all_params(theta):
    cfg = SgdConfig(initial_lr=1.0, momentum=0.0, weight_decay=0.5)
    theta.head.bias[:] = 2.0
    state = init_state(theta, cfg)
    sgd_step(theta, const_grads(theta, 0.0), state, cfg)
    np.testing.assert_allclose(theta.head.bias, 1.0)


def test_shape_mismatch(theta):
    cfg = SgdConfig()
    grads = const_grads(theta)
    grads["head.bias"] = np.zeros(3)
    with pytest.raises(DimensionError):
        sgd_step(theta, grads, init_state(theta, cfg), cfg)


@pytest.mark.parametrize("ticks,factor", [(6, 1.0), (7, 0.1), (14, 0.01)])
def test_step_decay(theta, ticks, factor):
    cfg = SgdConfig(initial_lr=0.2)
    state = init_state(theta, cfg)
    for _ in range(ticks):
        epoch_tick(state, cfg)
    assert state.current_lr == pytest.approx(0.2 * factor, rel=1e-15)


def test_reset_contract(theta):
    cfg = SgdConfig(initial_lr=0.1, weight_decay=0.0)
    state = init_state(theta, cfg)
    sgd_step(theta, const_grads(theta), state, cfg)
    for _ in range(10):
        epoch_tick(state, cfg)
    before = snapshot(theta)
    reset(state, cfg)
    assert state.current_lr == 0.1
    assert state.epochs_since_reset == 0
    assert sum(np.linalg.norm(v) for v in state.velocity.values()) == 0
    for k, v in theta.tensors().items():
        assert v.tobytes() == before[k].tobytes()
    sgd_step(theta, const_grads(theta, 0.0), state, cfg)
    for k, v in theta.tensors().items():
        np.testing.assert_array_equal(v, before[k])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["step", "tick", "reset"]), max_size=40))
def test_lr_invariant_under_random_sequences(ops):
    theta = init_params(SeededRng(0))
    cfg = SgdConfig(initial_lr=0.3)
    state = init_state(theta, cfg)
    g = const_grads(theta, 1e-3)
    for op in ops:
        if op == "step":
            sgd_step(theta, g, state, cfg)
        elif op == "tick":
            epoch_tick(state, cfg)
        else:
            reset(state, cfg)
        assert state.current_lr == 0.3 * 0.1 ** (state.epochs_since_reset // 7)


def test_no_momentum_no_decay_is_gradient_descent():
    # f(w) = 0.5 * sum(a * (w - c)^2) on the head weights; minimizer c
    theta = init_params(SeededRng(3))
    cfg = SgdConfig(initial_lr=0.1, momentum=0.0, weight_decay=0.0)
    state = init_state(theta, cfg)
    a = SeededRng(4).uniform(0.5, 2.0, theta.head.weight.shape)
    c = SeededRng(5).normal(theta.head.weight.shape)
    w_ref = theta.head.weight.copy()
    for _ in range(400):
        grads = {k: np.zeros_like(v) for k, v in theta.tensors().items()}
        grads["head.weight"] = a * (theta.head.weight - c)
        sgd_step(theta, grads, state, cfg)
        w_ref = w_ref - 0.1 * a * (w_ref - c)
    np.testing.assert_allclose(theta.head.weight, w_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(theta.head.weight, c, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SgdConfig(initial_lr=0.0)
    assert optim.SgdConfig().momentum == 0.98
