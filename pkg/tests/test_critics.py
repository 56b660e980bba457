import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmlag.critics import Batch, CriticPair, QFunction, critic_loss, soft_update, td_target
from ddmlag.numgrad import Activation, Adam, DimensionError, FeedforwardNetwork, Layer

STATE_DIM = 2


class ConstantCritic:
    def __init__(self, c):
        self.c = c

    def __call__(self, states, actions):
        return np.full(len(states), self.c)


class FixedPolicy:
    """Deterministic lookup policy over one-hot states."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def sample(self, states, rng=None):
        return self.table[np.argmax(np.asarray(states), axis=1)]


def tiny_critic(seed=0, hidden=6):
    return QFunction(STATE_DIM, 2, hidden=hidden, rng=np.random.default_rng(seed))


def test_td_target_terminal_cuts_bootstrap():
    y = td_target([1.0], np.zeros((1, STATE_DIM)), [1.0], FixedPolicy([[0, 0], [0, 0]]), ConstantCritic(7.0), 0.99,
                  next_actions=np.zeros((1, 2)))
    assert y.tolist() == [1.0]


def test_td_target_myopic():
    y = td_target([0.5, -2.0], np.zeros((2, STATE_DIM)), [0.0, 0.0], None, ConstantCritic(100.0), 0.0)
    assert y.tolist() == [0.5, -2.0]


def test_td_target_constant_critic():
    y = td_target([0.0], np.zeros((1, STATE_DIM)), [0.0], FixedPolicy([[0, 0], [0, 0]]), ConstantCritic(3.0), 0.99,
                  next_actions=np.zeros((1, 2)))
    assert y[0] == pytest.approx(0.99 * 3.0, abs=1e-15)


def test_td_target_samples_policy_when_no_actions_given():
    s2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    pol = FixedPolicy([[0.2, 0.0], [-0.2, 0.0]])

    class ActionReader:
        def __call__(self, states, actions):
            return actions[:, 0]

    y = td_target(np.zeros(2), s2, np.zeros(2), pol, ActionReader(), 0.5)
    assert y.tolist() == [0.1, -0.1]


def test_regression_loss_arithmetic():
    # single linear unit with zero weights: Q = 0, y = 2 -> 0.5 * 4
    net = FeedforwardNetwork([Layer(np.zeros((STATE_DIM + 2, 1)), np.zeros(1), Activation.IDENTITY)])
    q = QFunction(STATE_DIM, 2, net=net)
    loss, _ = q.regression_loss(np.zeros((1, STATE_DIM)), np.zeros((1, 2)), [2.0])
    assert loss == 2.0


def test_perfect_critic_has_zero_loss():
    q = tiny_critic(1)
    rng = np.random.default_rng(2)
    s, a = rng.normal(size=(5, STATE_DIM)), rng.normal(size=(5, 2))
    batch = Batch(s, a, q(s, a), np.zeros(5), s, np.ones(5))
    loss, grads = critic_loss(q, q, batch, None, 0.9)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_critic_loss_empty_batch():
    q = tiny_critic()
    empty = Batch(*(np.zeros((0, STATE_DIM)), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, STATE_DIM)),
                    np.zeros(0)))
    with pytest.raises(ValueError):
        critic_loss(q, q, empty, None, 0.9)


@pytest.mark.parametrize("use_cost", [False, True])
def test_critic_gradient_matches_finite_differences(use_cost):
    q = tiny_critic(3)
    target = tiny_critic(4)
    rng = np.random.default_rng(5)
    s, s2 = rng.normal(size=(6, STATE_DIM)), rng.normal(size=(6, STATE_DIM))
    batch = Batch(s, rng.normal(size=(6, 2)), rng.normal(size=6), rng.uniform(0, 5, 6), s2,
                  (rng.random(6) < 0.3).astype(float))
    a2 = rng.normal(size=(6, 2))
    _, grads = critic_loss(q, target, batch, None, 0.9, use_cost=use_cost, next_actions=a2)
    h = 1e-5
    worst = 0.0
    for p, g in zip(q.net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = critic_loss(q, target, batch, None, 0.9, use_cost=use_cost, next_actions=a2)
            p[idx] = old - h
            down, _ = critic_loss(q, target, batch, None, 0.9, use_cost=use_cost, next_actions=a2)
            p[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    assert worst < 1e-5


def test_action_gradient_matches_finite_differences():
    q = tiny_critic(6)
    rng = np.random.default_rng(7)
    s, a = rng.normal(size=(4, STATE_DIM)), rng.normal(size=(4, 2))
    _, dq = q.value_and_action_grad(s, a)
    h = 1e-6
    for j in range(2):
        da = np.zeros_like(a)
        da[:, j] = h
        fd = (q(s, a + da) - q(s, a - da)) / (2 * h)
        assert np.allclose(fd, dq[:, j], rtol=1e-5, atol=1e-8)


def test_soft_update_edge_cases():
    live, target = np.ones(4), np.zeros(4)
    soft_update(live, target, 0.0)
    assert np.array_equal(target, live)
    target = np.full(4, 3.0)
    soft_update(live, target, 1.0)
    assert np.all(target == 3.0)
    target = np.zeros(4)
    soft_update(live, target, 0.005)
    assert np.all(target == 0.995)


def test_soft_update_rejects_mismatch():
    with pytest.raises(DimensionError):
        soft_update(np.ones(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        soft_update(np.ones(3), np.zeros(3), 1.5)


@settings(max_examples=50, deadline=None)
@given(rho=st.floats(0.0, 0.999), k=st.integers(1, 40))
def test_soft_update_gap_shrinks_geometrically(rho, k):
    live, target = np.array([2.0, -1.0]), np.array([0.0, 3.0])
    gap0 = live - target
    for _ in range(k):
        soft_update(live, target, rho)
    assert np.allclose(live - target, gap0 * rho ** k, rtol=1e-9, atol=1e-12)


def test_soft_update_on_networks():
    a, b = tiny_critic(8), tiny_critic(9)
    expected = [0.9 * pb + 0.1 * pa for pa, pb in zip(a.net.parameters(), b.net.parameters())]
    v = b.net.version
    soft_update(a, b, 0.9)
    assert all(np.allclose(e, p, rtol=0, atol=1e-15) for e, p in zip(expected, b.net.parameters()))
    assert b.net.version == v + 1


def micro_mdp_values(rewards, nxt, policy_idx, gamma, iters=2000):
    """Q^pi by value iteration on a deterministic 2-state, 2-action MDP."""
    q = np.zeros((2, 2))
    for _ in range(iters):
        q = rewards + gamma * q[nxt, policy_idx[nxt]]
    return q


def train_micro_critic(signal, nxt, policy_idx, gamma, seed=0, steps=3000):
    onehot = np.eye(2)
    action_vecs = np.array([[-0.5, 0.5], [0.5, -0.5]])
    s_idx, a_idx = np.repeat([0, 1], 2), np.tile([0, 1], 2)
    states, actions = onehot[s_idx], action_vecs[a_idx]
    next_states = onehot[nxt[s_idx, a_idx]]
    pol = FixedPolicy(action_vecs[policy_idx])
    q = QFunction(2, 2, hidden=32, rng=np.random.default_rng(seed))
    target = q.copy()
    opt = Adam(q.net, 3e-3)
    batch = Batch(states, actions, signal[s_idx, a_idx], signal[s_idx, a_idx], next_states, np.zeros(4))
    for _ in range(steps):
        _, g = critic_loss(q, target, batch, pol, gamma)
        opt.step(g)
        soft_update(q, target, 0.95)
    learned = q(states, actions).reshape(2, 2)
    return learned


def test_micro_mdp_reward_critic_matches_value_iteration():
    rewards = np.array([[1.0, 0.0], [0.5, 2.0]])
    nxt = np.array([[1, 0], [0, 1]])
    policy_idx = np.array([0, 1])
    truth = micro_mdp_values(rewards, nxt, policy_idx, 0.8)
    learned = train_micro_critic(rewards, nxt, policy_idx, 0.8)
    assert np.max(np.abs(learned - truth)) < 0.05


def test_micro_mdp_cost_critic_contracts_identically():
    costs = np.array([[0.0, 5.0], [1.0, 0.0]])
    nxt = np.array([[0, 1], [1, 0]])
    policy_idx = np.array([1, 1])
    truth = micro_mdp_values(costs, nxt, policy_idx, 0.8)
    learned = train_micro_critic(costs, nxt, policy_idx, 0.8, seed=1)
    assert np.max(np.abs(learned - truth)) < 0.05


def test_critic_pair_round_trip_and_targets():
    pair = CriticPair(STATE_DIM, 2, hidden=5, rho=0.9, rng=np.random.default_rng(10))
    pair.set_normalizer(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
    for p in pair.q_reward.net.parameters():
        p += 1.0
    pair.update_targets()
    clone = CriticPair.from_state(*pair.to_state())
    s, a = np.ones((3, STATE_DIM)), np.zeros((3, 2))
    for name in ("q_reward", "q_cost", "target_q_reward", "target_q_cost"):
        assert getattr(pair, name)(s, a).tobytes() == getattr(clone, name)(s, a).tobytes()
    with pytest.raises(ValueError):
        CriticPair(STATE_DIM, rho=1.0)
