import numpy as np
import pytest
from scipy.special import softmax

from common import ConfigError, NumericError, ShapeMismatchError, make_rng
from optim import AdamConfig, AdamState, adam_step, softmax_chain


def reference_adam(params, grads_per_step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    for t, g in enumerate(grads_per_step, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g**2
        params = params - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return params


def test_first_step_moves_by_learning_rate():
    params, state = adam_step(np.array([1.0, -2.0]), np.array([0.5, -3.0]), AdamState.zeros((2,), lr=0.1))
    np.testing.assert_allclose(params, [0.9, -1.9], atol=1e-8)
    assert state.t == 1


def test_matches_reference_loop():
    rng = make_rng(0)
    start = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(25)]
    params, state = start, AdamState.zeros(start.shape, lr=0.01)
    for g in grads:
        params, state = adam_step(params, g, state)
    np.testing.assert_allclose(params, reference_adam(start, grads, 0.01), rtol=1e-13, atol=1e-15)
    assert state.t == 25


def test_state_is_not_mutated():
    state = AdamState.zeros((2,), lr=0.1)
    adam_step(np.zeros(2), np.ones(2), state)
    np.testing.assert_array_equal(state.m, [0.0, 0.0])
    assert state.t == 0


def test_minimises_quadratic():
    params, state = np.array([3.0, -4.0]), AdamState.zeros((2,), lr=0.05)
    for _ in range(2000):
        params, state = adam_step(params, 2 * params, state)
    np.testing.assert_allclose(params, 0.0, atol=0.05)


def test_config_values_are_used():
    state = AdamState.zeros((1,), lr=1.0, config=AdamConfig(beta1=0.5, beta2=0.75, eps=1.0))
    params, _ = adam_step(np.array([0.0]), np.array([2.0]), state)
    np.testing.assert_allclose(params, [-2.0 / 3.0])


def test_errors():
    state = AdamState.zeros((2,), lr=0.1)
    with pytest.raises(ShapeMismatchError):
        adam_step(np.zeros(3), np.zeros(3), state)
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), state)


@pytest.mark.parametrize("data", [{"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}, {"lr": 0.1}])
def test_config_errors(data):
    with pytest.raises(ConfigError):
        AdamConfig.from_dict(data)


def test_softmax_chain_matches_finite_differences():
    rng = make_rng(1)
    logits = rng.standard_normal((3, 5))
    weights = rng.standard_normal((3, 5))
    grad = softmax_chain(logits, weights)
    step = 1e-6
    for t in range(3):
        for i in range(5):
            up, down = logits.copy(), logits.copy()
            up[t, i] += step
            down[t, i] -= step
            fd = (np.sum(weights * softmax(up, axis=1)) - np.sum(weights * softmax(down, axis=1))) / (2 * step)
            assert grad[t, i] == pytest.approx(fd, abs=1e-8)


def test_softmax_chain_rows_sum_to_zero():
    logits = make_rng(2).standard_normal((4, 6))
    grad = softmax_chain(logits, make_rng(3).standard_normal((4, 6)))
    np.testing.assert_allclose(np.sum(grad, axis=1), 0.0, atol=1e-15)
    with pytest.raises(ShapeMismatchError):
        softmax_chain(logits, np.zeros((4, 5)))


def test_softmax_chain_examples():
    np.testing.assert_allclose(softmax_chain(np.zeros((1, 4)), np.full((1, 4), 3.0)), 0.0, atol=1e-15)
    grad = softmax_chain(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(grad, [[0.196612, -0.196612]], atol=1e-6)
    np.testing.assert_allclose(softmax_chain(np.array([1.0, 0.0]), np.array([1.0, 0.0])), grad[0], atol=1e-15)


def test_softmax_chain_ignores_logit_shift():
    rng = make_rng(4)
    logits = rng.standard_normal((5, 3))
    upstream = rng.standard_normal((5, 3))
    np.testing.assert_allclose(softmax_chain(logits + 700.0, upstream), softmax_chain(logits, upstream), atol=1e-12)


def test_zero_gradient_leaves_params():
    params, state = adam_step(np.array([1.0, 2.0]), np.zeros(2), AdamState.zeros((2,), lr=0.1))
    np.testing.assert_array_equal(params, [1.0, 2.0])
    assert state.t == 1
