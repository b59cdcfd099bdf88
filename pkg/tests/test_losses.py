import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdnn.gradcheck import numeric_gradient
from hdnn.losses import Metrics, cross_entropy_loss, cross_entropy_sum, mae, mse_loss, r_squared
from hdnn.optim import AdamState, adam_step
from hdnn.tensor import RngStream

vec = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50, allow_nan=False))


def test_mse_examples():
    loss, grad = mse_loss(np.array([1.0, 2.0]), np.zeros(2))
    assert loss == 2.5
    assert grad.tolist() == [1.0, 2.0]
    x = np.array([0.3, -4.0, 2.0])
    loss, grad = mse_loss(x, x.copy())
    assert loss == 0.0 and np.all(grad == 0)


def test_mse_grad_keeps_pred_shape():
    _, grad = mse_loss(np.ones((3, 1)), np.zeros(3))
    assert grad.shape == (3, 1)


def test_mse_length_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros(2), np.zeros(3))


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_mse_gradient_matches_finite_differences(seed, m):
    rng = RngStream(seed)
    pred, target = rng.normal(m), rng.normal(m)
    _, g = mse_loss(pred, target)
    num = numeric_gradient(lambda: mse_loss(pred, target)[0], pred)
    assert np.all(np.abs(g - num) <= 1e-6 * np.maximum(np.abs(g), 1e-3))


def test_cross_entropy_examples():
    loss, grad = cross_entropy_loss(np.zeros((1, 2)), np.array([0]))
    assert abs(loss - math.log(2)) < 1e-9
    assert np.allclose(grad, [[-0.5, 0.5]], rtol=0, atol=1e-15)
    loss, _ = cross_entropy_loss(np.array([[30.0, -30.0]]), np.array([0]))
    assert loss < 1e-12


def test_cross_entropy_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0.5, 1]))


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 5), st.floats(-20, 20))
def test_cross_entropy_properties(seed, m, c, shift):
    rng = RngStream(seed)
    logits = 3 * rng.normal((m, c))
    labels = rng.integers(0, c, size=m)
    loss, grad = cross_entropy_loss(logits, labels)
    # rows of softmax minus one-hot sum to zero
    assert np.all(np.abs(grad.sum(axis=1)) < 1e-15)
    shifted, _ = cross_entropy_loss(logits + shift, labels)
    assert abs(shifted - loss) < 1e-10
    total = cross_entropy_sum(logits, labels)
    assert abs(total - m * loss) <= 1e-12 * max(1.0, abs(total))


def test_cross_entropy_sum_is_m_times_mean_exactly():
    logits = np.array([[0.0, 0.0], [0.0, 0.0]])
    assert cross_entropy_sum(logits, np.array([0, 1])) == 2 * cross_entropy_loss(logits, np.array([0, 1]))[0]


def test_r_squared_examples():
    x = np.array([1.0, 4.0, 2.0, 8.0])
    assert r_squared(x, x) == pytest.approx(1.0, abs=1e-15)
    assert r_squared(np.array([1.0, 2.0, 3.0]), np.array([3.0, 2.0, 1.0])) == pytest.approx(1.0, abs=1e-15)
    assert r_squared(np.array([1.0, -1, 1, -1]), np.array([1.0, 1, -1, -1])) == 0.0
    assert r_squared(np.full(3, 2.0), np.array([1.0, 2.0, 3.0])) == 0.0


@settings(max_examples=50)
@given(vec, st.floats(-5, 5).filter(lambda a: abs(a) > 1e-2), st.floats(-10, 10))
def test_r_squared_affine_invariant(pred, a, b):
    rng = RngStream(len(pred))
    target = rng.normal(pred.shape)
    if np.ptp(pred) < 1e-3:
        return
    assert abs(r_squared(a * pred + b, target) - r_squared(pred, target)) < 1e-10


def test_mae_examples():
    x = np.array([1.0, -2.0])
    assert mae(x, x) == 0.0
    assert mae(np.array([1.0, 3.0]), np.zeros(2)) == 2.0


@given(vec)
def test_mae_symmetric(a):
    b = a[::-1].copy()
    assert mae(a, b) == mae(b, a)


def test_metrics_line_round_trip():
    m = Metrics.compute(np.array([1.0, 2.5, 3.25]), np.array([0.5, 2.0, 4.0]))
    line = m.format_line()
    assert line.startswith("mse=") and line.endswith(" n=3")
    back = Metrics.parse_line(line)
    assert back.count == 3
    for f in ("mse", "mae", "r_squared"):
        assert abs(getattr(back, f) - getattr(m, f)) <= 1e-8 * abs(getattr(m, f))
    with pytest.raises(ValueError):
        Metrics.parse_line("mse=1 mae=2")


# ---------------------------------------------------------------- Adam

def _hand_adam(g_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState())
    assert params["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_scalar():
    params = {"w": np.zeros(1)}
    adam_step(params, {"w": np.ones(1)}, AdamState())
    # lr * 1 / (1 + eps)
    assert abs(params["w"][0] - (-9.9999999e-4)) < 1e-12
    assert params["w"][0] == _hand_adam([1.0])


def test_adam_two_constant_steps():
    params = {"w": np.zeros(1)}
    state = AdamState()
    for _ in range(2):
        adam_step(params, {"w": np.ones(1)}, state)
    assert abs(params["w"][0] - (-1.99999999e-3)) < 1e-9
    assert state.t == 2


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6))
def test_adam_matches_hand_recurrence(gs):
    params = {"w": np.zeros(1)}
    state = AdamState()
    for g in gs:
        adam_step(params, {"w": np.array([g])}, state)
    assert abs(params["w"][0] - _hand_adam(gs)) < 1e-15


def test_adam_zero_lr_identity_but_moments_advance():
    params = {"w": np.array([0.5, 1.5])}
    state = AdamState(lr=0.0)
    adam_step(params, {"w": np.array([1.0, -1.0])}, state)
    assert params["w"].tolist() == [0.5, 1.5]
    assert state.t == 1 and np.allclose(state.m["w"], [0.1, -0.1])


def test_adam_rejects_mismatched_grads():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
