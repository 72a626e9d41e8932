import numpy as np
import pytest

from fedcka.errors import ContractError, DimensionError
from fedcka.optim import OptimState, sgd_step
from fedcka.tensor import parameter


def test_plain_step_subtracts_grad():
    w = parameter(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, 0.25, -1.0])
    sgd_step([w], [g], OptimState(lr=1.0, momentum=0.0, weight_decay=0.0))
    np.testing.assert_array_equal(w.data, [0.5, -2.25, 4.0])


def test_zero_grad_keeps_weights_and_decays_velocity():
    w = parameter(np.array([1.0, 2.0]))
    state = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0)
    state.velocity = [np.array([0.0, 0.0])]
    sgd_step([w], [np.zeros(2)], state)
    np.testing.assert_array_equal(w.data, [1.0, 2.0])

    state.velocity = [np.array([1.0, -1.0])]
    before = w.data.copy()
    sgd_step([w], [np.zeros(2)], state)
    np.testing.assert_allclose(state.velocity[0], [0.9, -0.9])
    np.testing.assert_allclose(w.data, before - 0.1 * np.array([0.9, -0.9]))


def test_two_momentum_steps_match_hand_recurrence():
    w0 = np.array([0.3, -1.2, 2.0])
    g1 = np.array([0.1, 0.2, -0.3])
    g2 = np.array([-0.4, 0.05, 0.6])
    lr, mom, wd = 0.1, 0.9, 1e-5
    w = parameter(w0.copy())
    state = OptimState(lr=lr, momentum=mom, weight_decay=wd)
    sgd_step([w], [g1], state)
    sgd_step([w], [g2], state)

    v1 = g1 + wd * w0
    w1 = w0 - lr * v1
    v2 = mom * v1 + g2 + wd * w1
    w2 = w1 - lr * v2
    np.testing.assert_allclose(w.data, w2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.velocity[0], v2, rtol=0, atol=1e-12)


def test_descent_on_convex_quadratic_is_monotone(rng):
    a = rng.standard_normal((6, 4))
    h = a.T @ a + 0.1 * np.eye(4)
    lr = 1.0 / np.linalg.eigvalsh(h).max()
    w = parameter(rng.standard_normal(4))
    state = OptimState(lr=lr, momentum=0.0, weight_decay=0.0)
    prev = 0.5 * w.data @ h @ w.data
    for _ in range(50):
        sgd_step([w], [h @ w.data], state)
        cur = 0.5 * w.data @ h @ w.data
        assert cur <= prev
        prev = cur


def test_shape_mismatch():
    w = parameter(np.zeros(3))
    with pytest.raises(DimensionError):
        sgd_step([w], [np.zeros(4)], OptimState())


@pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(momentum=1.0), dict(weight_decay=-1.0)])
def test_invalid_state(kwargs):
    with pytest.raises(ContractError):
        OptimState(**kwargs)
