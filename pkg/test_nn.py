"""Tests for the numerical core: convolutions, ConvLSTM, loss, gradient oracle, Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.exceptions import MissingCacheError, NonDeterministicClosureError, ShapeMismatchError
from src.nn import (
    Adam,
    Conv2d,
    ConvLSTMCell,
    ConvLstmState,
    Parameter,
    Tanh,
    activation,
    clip_grad_norm,
    conv2d,
    conv2d_vjp,
    convlstm_step,
    convlstm_step_vjp,
    finite_diff_check,
    softmax,
    weighted_softmax_ce,
)


def _sig(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


# =============================================================================
# CONV2D
# =============================================================================

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 6))
    out, _ = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_zero_kernel_gives_bias():
    x = np.random.default_rng(1).normal(size=(2, 4, 4))
    out, _ = conv2d(x, np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]))
    assert out.shape == (3, 4, 4)
    np.testing.assert_array_equal(out[1], np.full((4, 4), -1.0))


def test_conv_hand_example():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out, _ = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 10.0))


def test_conv_batch_matches_single():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 5, 5))
    kernel, bias = rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched, _ = conv2d(x, kernel, bias)
    for b in range(3):
        single, _ = conv2d(x[b], kernel, bias)
        np.testing.assert_allclose(batched[b], single, rtol=0, atol=1e-14)


def test_conv_rejects_bad_shapes():
    x = np.zeros((2, 4, 4))
    with pytest.raises(ShapeMismatchError):
        conv2d(x, np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatchError):
        conv2d(x, np.zeros((1, 2, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeMismatchError):
        conv2d(x, np.zeros((1, 2, 3, 3)), np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_conv_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 5, 4))
    kernel = rng.normal(size=(3, 2, 3, 3))
    zero = np.zeros(3)
    combined, _ = conv2d(a * x + b * y, kernel, zero)
    separate = a * conv2d(x, kernel, zero)[0] + b * conv2d(y, kernel, zero)[0]
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-10)


def test_conv_vjp_zero_upstream():
    rng = np.random.default_rng(3)
    out, cache = conv2d(rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    grads = conv2d_vjp(np.zeros_like(out), cache)
    assert all(not g.any() for g in grads)


def test_conv_vjp_identity_kernel():
    rng = np.random.default_rng(4)
    _, cache = conv2d(rng.normal(size=(1, 3, 3)), np.ones((1, 1, 1, 1)), np.zeros(1))
    upstream = rng.normal(size=(1, 3, 3))
    grad_input, _, grad_bias = conv2d_vjp(upstream, cache)
    np.testing.assert_array_equal(grad_input, upstream)
    assert grad_bias[0] == pytest.approx(upstream.sum())


def test_conv_vjp_requires_cache():
    with pytest.raises(MissingCacheError):
        conv2d_vjp(np.zeros((1, 2, 2)), None)
    with pytest.raises(MissingCacheError):
        Conv2d("c", 1, 1, 3, np.random.default_rng(0)).backward(np.zeros((1, 2, 2)))


@pytest.mark.parametrize("batched", [False, True])
def test_conv_vjp_matches_finite_differences(batched):
    rng = np.random.default_rng(5)
    shape = (2, 2, 4, 4) if batched else (2, 4, 4)
    x = Parameter("x", rng.normal(size=shape))
    kernel = Parameter("k", rng.normal(size=(2, 2, 3, 3)))
    bias = Parameter("b", rng.normal(size=2))
    upstream = rng.normal(size=shape)

    def closure():
        out, cache = conv2d(x.value, kernel.value, bias.value)
        # quadratic so the check sees a non-constant gradient
        loss = float(np.sum(upstream * out) + 0.5 * np.sum(out * out))
        return loss, conv2d_vjp(upstream + out, cache)

    assert finite_diff_check(closure, [x, kernel, bias], h=1e-5) < 1e-6


# =============================================================================
# CONVLSTM
# =============================================================================

def test_convlstm_all_zero():
    x = np.zeros((2, 3, 3))
    state = ConvLstmState.zeros((4, 3, 3))
    h, new_state, cache = convlstm_step(x, state, np.zeros((16, 6, 3, 3)), np.zeros(16))
    np.testing.assert_array_equal(cache.i, 0.5)
    np.testing.assert_array_equal(cache.f, 0.5)
    np.testing.assert_array_equal(cache.o, 0.5)
    np.testing.assert_array_equal(cache.g, 0.0)
    assert not new_state.c.any() and not h.any()


def test_convlstm_perfect_memory():
    rng = np.random.default_rng(6)
    hidden = 3
    c = rng.normal(size=(hidden, 4, 4))
    state = ConvLstmState(h=rng.normal(size=(hidden, 4, 4)), c=c)
    bias = np.concatenate([np.full(hidden, -1000.0), np.full(hidden, 1000.0),
                           np.zeros(hidden), np.full(hidden, 1000.0)])
    h, new_state, _ = convlstm_step(np.zeros((2, 4, 4)), state, np.zeros((4 * hidden, 2 + hidden, 3, 3)), bias)
    np.testing.assert_array_equal(new_state.c, c)
    np.testing.assert_array_equal(h, np.tanh(c))


def test_convlstm_scalar_by_hand():
    x, h_prev, c_prev = 0.7, 0.2, -0.4
    w_x = {"i": 0.5, "f": -0.3, "g": 1.2, "o": 0.8}
    w_h = {"i": -0.6, "f": 0.9, "g": 0.4, "o": -0.1}
    b = {"i": 0.1, "f": 0.2, "g": -0.3, "o": 0.05}
    kernel = np.array([[[[w_x[gate]]], [[w_h[gate]]]] for gate in "ifgo"])
    bias = np.array([b[gate] for gate in "ifgo"])

    h, state, _ = convlstm_step(
        np.full((1, 1, 1), x), ConvLstmState(np.full((1, 1, 1), h_prev), np.full((1, 1, 1), c_prev)),
        kernel, bias,
    )
    z = {gate: w_x[gate] * x + w_h[gate] * h_prev + b[gate] for gate in "ifgo"}
    c_new = _sig(z["f"]) * c_prev + _sig(z["i"]) * math.tanh(z["g"])
    h_new = _sig(z["o"]) * math.tanh(c_new)
    assert state.c[0, 0, 0] == pytest.approx(c_new, rel=1e-14)
    assert h[0, 0, 0] == pytest.approx(h_new, rel=1e-14)


def test_convlstm_vjp_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = Parameter("x", rng.normal(size=(2, 2, 4, 4)))
    h0 = Parameter("h0", rng.normal(size=(2, 3, 4, 4)))
    c0 = Parameter("c0", rng.normal(size=(2, 3, 4, 4)))
    kernel = Parameter("k", rng.normal(scale=0.4, size=(12, 5, 3, 3)))
    bias = Parameter("b", rng.normal(scale=0.4, size=12))
    up_h, up_c = rng.normal(size=(2, 2, 3, 4, 4))

    def closure():
        h, state, cache = convlstm_step(x.value, ConvLstmState(h0.value, c0.value), kernel.value, bias.value)
        loss = float(np.sum(up_h * h) + np.sum(up_c * state.c))
        gx, gh, gc, gk, gb = convlstm_step_vjp(up_h, up_c, cache)
        return loss, [gx, gh, gc, gk, gb]

    assert finite_diff_check(closure, [x, h0, c0, kernel, bias], h=1e-5, n_coords=300) < 1e-6


def test_convlstm_cell_unrolled_gradients():
    rng = np.random.default_rng(8)
    cell = ConvLSTMCell("lstm", 2, 3, 3, rng)
    inputs = rng.normal(size=(3, 1, 2, 5, 5))
    target = rng.normal(size=(1, 3, 5, 5))

    def closure():
        for param in cell.parameters():
            param.zero_grad()
        cell.clear()
        state = cell.initial_state(1, 5, 5)
        for x in inputs:
            h, state = cell.step(x, state)
        loss = float(np.sum(target * h))
        grad_h, grad_c = target, np.zeros_like(target)
        for _ in inputs:
            _, grad_h, grad_c = cell.backward_step(grad_h, grad_c)
        return loss, [p.grad.copy() for p in cell.parameters()]

    assert [p.name for p in cell.parameters()][:2] == ["lstm.w_i", "lstm.w_f"]
    assert finite_diff_check(closure, cell.parameters(), h=1e-5) < 1e-4


def test_forget_bias_keeps_memory_through_quiet_steps():
    cell = ConvLSTMCell("lstm", 1, 2, 3, np.random.default_rng(3), forget_bias=5.0)
    biases = {p.name: p.value for p in cell.parameters() if ".b_" in p.name}
    np.testing.assert_array_equal(biases["lstm.b_f"], 5.0)
    assert not biases["lstm.b_i"].any() and not biases["lstm.b_o"].any()
    for kernel in cell.kernels:
        kernel.value[...] = 0.0
    state = ConvLstmState(np.zeros((1, 2, 4, 4)), np.ones((1, 2, 4, 4)))
    for _ in range(40):
        _, state = cell.step(np.zeros((1, 1, 4, 4)), state)
    forget = 1.0 / (1.0 + math.exp(-5.0))
    np.testing.assert_allclose(state.c, forget ** 40, rtol=1e-12)
    assert forget ** 40 > 0.75


def test_state_shapes_must_agree():
    with pytest.raises(ShapeMismatchError):
        ConvLstmState(h=np.zeros((2, 3, 3)), c=np.zeros((1, 3, 3)))


# =============================================================================
# ACTIVATIONS & LOSS
# =============================================================================

def test_activation_lookup():
    assert isinstance(activation("tanh"), Tanh)
    with pytest.raises(ValueError):
        activation("swish")


def test_softmax_sums_to_one():
    z = np.random.default_rng(9).normal(scale=50.0, size=(3, 2, 4, 4))
    np.testing.assert_allclose(softmax(z).sum(axis=-3), 1.0, rtol=0, atol=1e-12)


def test_ce_equal_logits():
    loss, _ = weighted_softmax_ce(np.zeros((2, 3, 3)), np.zeros((3, 3)), np.ones((3, 3)), (1.0, 1.0))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


def test_ce_weight_algebra():
    labels = np.array([[1, 0]])
    loss, grad = weighted_softmax_ce(np.zeros((2, 1, 2)), labels, np.ones((1, 2)), (1.0, 1000.0))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    # positive cell pulls 1000x harder than the negative one
    assert grad[1, 0, 0] == pytest.approx(-0.5 * 1000.0 / 1001.0)
    assert grad[0, 0, 1] == pytest.approx(-0.5 * 1.0 / 1001.0)
    assert grad[1, 0, 0] / grad[0, 0, 1] == pytest.approx(1000.0)


def test_ce_masked_cells_are_ignored():
    logits = np.random.default_rng(10).normal(size=(2, 2, 2))
    mask = np.array([[1, 0], [1, 1]])
    _, grad = weighted_softmax_ce(logits, np.array([[0, 1], [1, 0]]), mask, (1.0, 5.0))
    assert not grad[:, 0, 1].any()
    with pytest.raises(ValueError):
        weighted_softmax_ce(logits, np.zeros((2, 2)), np.zeros((2, 2)), (1.0, 1.0))
    with pytest.raises(ValueError):
        weighted_softmax_ce(logits, np.zeros((2, 2)), np.ones((2, 2)), (1.0, 0.0))


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    logits = Parameter("logits", rng.normal(size=(2, 3, 3)))
    labels = rng.integers(0, 2, size=(3, 3))
    mask = np.ones((3, 3))
    mask[0, 0] = 0

    def closure():
        loss, grad = weighted_softmax_ce(logits.value, labels, mask, (1.0, 7.0))
        return loss, [grad]

    loss, _ = closure()
    assert loss >= 0
    assert finite_diff_check(closure, [logits], h=1e-5) < 1e-6


# =============================================================================
# GRADIENT ORACLE & OPTIMIZER
# =============================================================================

def test_finite_diff_quadratic():
    theta = Parameter("theta", np.array([1.0, -0.5, 2.0]))

    def closure():
        return float(np.sum(theta.value**2)), [2.0 * theta.value]

    assert finite_diff_check(closure, [theta], h=1e-3) < 1e-10
    np.testing.assert_array_equal(theta.value, [1.0, -0.5, 2.0])


def test_finite_diff_zero_loss():
    theta = Parameter("theta", np.ones(4))
    assert finite_diff_check(lambda: (0.0, [np.zeros(4)]), [theta]) == 0.0


def test_finite_diff_detects_nondeterminism():
    theta = Parameter("theta", np.ones(2))
    rng = np.random.default_rng(12)

    def closure():
        return float(rng.normal()), [np.zeros(2)]

    with pytest.raises(NonDeterministicClosureError):
        finite_diff_check(closure, [theta])


def test_finite_diff_flags_wrong_gradient():
    theta = Parameter("theta", np.array([1.0, 2.0]))
    assert finite_diff_check(lambda: (float(np.sum(theta.value**2)), [theta.value.copy()]), [theta]) > 0.4


def test_adam_first_step_moves_by_learning_rate():
    param = Parameter("w", np.array([1.0, -2.0, 0.5]))
    param.grad[:] = [0.3, -4.0, 1e-3]
    Adam([param], learning_rate=0.01).step()
    np.testing.assert_allclose(param.value, [0.99, -1.99, 0.49], rtol=0, atol=1e-6)


def test_adam_zero_learning_rate_keeps_values():
    param = Parameter("w", np.array([1.0, 2.0]))
    param.grad[:] = [5.0, -5.0]
    optimizer = Adam([param], learning_rate=0.0)
    optimizer.step()
    np.testing.assert_array_equal(param.value, [1.0, 2.0])
    optimizer.zero_grad()
    assert not param.grad.any()


def test_clip_grad_norm():
    a, b = Parameter("a", np.zeros(2)), Parameter("b", np.zeros(1))
    a.grad[:] = [3.0, 0.0]
    b.grad[:] = [4.0]
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
