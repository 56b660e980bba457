import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmlag.numgrad import (
    Activation,
    Adam,
    AdamState,
    DimensionError,
    FeedforwardNetwork,
    Layer,
    NonFiniteError,
    StaleTapeError,
    activate,
    adam_step,
    tensor,
)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def fd_param_grads(net, x, weights, h=1e-5):
    """Central differences of sum(weights * net(x)) w.r.t. every parameter."""
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = float(np.sum(weights * net(x)))
            p[idx] = old - h
            down = float(np.sum(weights * net(x)))
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def fd_input_grad(net, x, weights, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (np.sum(weights * net(xp)) - np.sum(weights * net(xm))) / (2 * h)
    return g


def scalar_net(w=2.0):
    return FeedforwardNetwork([Layer(np.array([[w]]), np.array([0.0]), Activation.IDENTITY)])


def test_single_layer_forward():
    out, _ = scalar_net().forward(np.array([[3.0]]))
    assert out.tolist() == [[6.0]]


def test_zero_input_relu_gives_zero():
    rng = np.random.default_rng(0)
    net = FeedforwardNetwork.build([4, 8, 3], rng, hidden=Activation.RELU, output=Activation.RELU)
    assert np.all(net(np.zeros((5, 4))) == 0.0)


def test_forward_matches_straight_line_evaluation():
    rng = np.random.default_rng(1)
    net = FeedforwardNetwork.build([3, 5, 2], rng, hidden=Activation.MISH)
    for layer in net.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    x = rng.normal(size=(4, 3))
    (w0, b0), (w1, b1) = [(l.weight, l.bias) for l in net.layers]
    z = x @ w0 + b0
    h = z * np.tanh(np.log1p(np.exp(z)))
    expected = h @ w1 + b1
    assert np.max(np.abs(net(x) - expected)) < 1e-12


def test_forward_dimension_error():
    net = FeedforwardNetwork.build([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(DimensionError):
        net(np.zeros((2, 5)))


def test_checked_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        tensor([1.0, math.nan])
    assert tensor([1.0, math.nan], checked=False).shape == (2,)


def test_scalar_backward_product_rule():
    net = scalar_net()
    _, tape = net.forward(np.array([[3.0]]))
    grads, g_in = net.backward(tape, np.array([[1.0]]))
    assert grads[0].tolist() == [[3.0]]
    assert g_in.tolist() == [[2.0]]


def test_zero_output_gradient_gives_zero():
    rng = np.random.default_rng(2)
    net = FeedforwardNetwork.build([3, 6, 6, 2], rng)
    out, tape = net.forward(rng.normal(size=(4, 3)))
    grads, g_in = net.backward(tape, np.zeros_like(out))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(g_in == 0.0)


def test_stale_tape_rejected():
    rng = np.random.default_rng(3)
    net = FeedforwardNetwork.build([2, 4, 1], rng)
    out, tape = net.forward(np.ones((1, 2)))
    opt = Adam(net, 1e-3)
    opt.step([np.ones_like(p) for p in net.parameters()])
    with pytest.raises(StaleTapeError):
        net.backward(tape, np.ones_like(out))


@pytest.mark.parametrize("activation", [Activation.MISH, Activation.RELU, Activation.TANH])
def test_three_layer_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(4)
    net = FeedforwardNetwork.build([4, 7, 7, 3], rng, hidden=activation)
    for layer in net.layers:
        layer.bias[:] = 0.1 * rng.normal(size=layer.bias.shape)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))
    out, tape = net.forward(x)
    grads, g_in = net.backward(tape, w)
    for a, b in zip(grads, fd_param_grads(net, x, w)):
        assert rel_err(a, b) < 1e-6
    assert rel_err(g_in, fd_input_grad(net, x, w)) < 1e-6


def test_composition_chains_through_input_gradient():
    rng = np.random.default_rng(5)
    g_net = FeedforwardNetwork.build([3, 6, 4], rng)
    f_net = FeedforwardNetwork.build([4, 6, 2], rng)
    x = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 2))
    mid, g_tape = g_net.forward(x)
    out, f_tape = f_net.forward(mid)
    _, g_mid = f_net.backward(f_tape, w)
    _, g_x = g_net.backward(g_tape, g_mid)
    numeric = np.zeros_like(x)
    h = 1e-5
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric[idx] = (np.sum(w * f_net(g_net(xp))) - np.sum(w * f_net(g_net(xm)))) / (2 * h)
    assert rel_err(g_x, numeric) < 1e-5


def test_forward_is_bitwise_deterministic():
    net = FeedforwardNetwork.build([6, 16, 16, 2], np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(8, 6))
    assert net(x).tobytes() == net(x).tobytes()


def test_mish_matches_reference_over_wide_range():
    z = np.linspace(-700, 700, 20001)
    ref = z * np.tanh(np.logaddexp(0.0, z))
    assert np.max(np.abs(activate(Activation.MISH, z) - ref) / np.maximum(1.0, np.abs(ref))) < 1e-14


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p, 1e-3)
    before = p[0].copy()
    for _ in range(3):
        adam_step(p, [np.zeros(2)], state)
    assert p[0].tobytes() == before.tobytes()
    assert np.all(state.first_moment[0] == 0.0) and np.all(state.second_moment[0] == 0.0)


def test_adam_zero_gradient_decays_moments():
    p = [np.array([1.0])]
    state = AdamState.for_params(p, 1e-3)
    state.first_moment[0][:] = 0.5
    state.second_moment[0][:] = 0.25
    adam_step(p, [np.zeros(1)], state)
    assert state.first_moment[0][0] == pytest.approx(0.45)
    assert state.second_moment[0][0] == pytest.approx(0.24975)


def test_adam_first_step_moves_by_lr():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, 0.001)
    adam_step(p, [np.array([1.0])], state)
    assert abs(p[0][0] + 0.001) < 1e-10
    assert state.step_count == 1


def test_adam_two_steps_match_scripted_trace():
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    p_ref, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        p_ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = [np.array([0.0])]
    state = AdamState.for_params(p, lr)
    for _ in range(2):
        adam_step(p, [np.array([1.0])], state)
    assert abs(p[0][0] - p_ref) < 1e-12


def test_adam_rejects_nonfinite_with_index():
    p = [np.zeros(2), np.zeros(3)]
    state = AdamState.for_params(p, 1e-3)
    with pytest.raises(NonFiniteError, match="4"):
        adam_step(p, [np.zeros(2), np.array([0.0, 0.0, math.inf])], state)
    assert state.step_count == 0
    assert all(np.all(x == 0.0) for x in p)


def test_state_round_trip():
    net = FeedforwardNetwork.build([3, 5, 2], np.random.default_rng(8))
    meta, arrays = net.to_state()
    other = FeedforwardNetwork.from_state(meta, arrays)
    x = np.ones((2, 3))
    assert net(x).tobytes() == other(x).tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), width=st.integers(1, 6), batch=st.integers(1, 4))
def test_gradient_property_random_networks(seed, width, batch):
    rng = np.random.default_rng(seed)
    net = FeedforwardNetwork.build([3, width, width, 2], rng)
    x = rng.normal(size=(batch, 3))
    w = rng.normal(size=(batch, 2))
    _, tape = net.forward(x)
    grads, _ = net.backward(tape, w)
    for a, b in zip(grads, fd_param_grads(net, x, w)):
        assert np.max(np.abs(a - b)) < 1e-5 * max(1.0, float(np.max(np.abs(b))))
