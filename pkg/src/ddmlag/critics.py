"""Reward and cost critics with Polyak-averaged targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numgrad import Activation, DimensionError, FeedforwardNetwork


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


class QFunction:
    """``Q(s, a)`` backed by an MLP over ``concat(normalized s, a)``."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int = 2,
        hidden: int = 256,
        n_hidden: int = 2,
        rng: np.random.Generator | None = None,
        net: FeedforwardNetwork | None = None,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        if net is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            net = FeedforwardNetwork.build(
                [state_dim + action_dim] + [hidden] * n_hidden + [1], rng, hidden=Activation.RELU
            )
        if net.in_dim != state_dim + action_dim or net.out_dim != 1:
            raise DimensionError("critic network must map state_dim + action_dim -> 1")
        self.net = net
        self.state_mean = np.zeros(state_dim)
        self.state_std = np.ones(state_dim)

    def _inputs(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if s.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise DimensionError("state/action dims do not match critic")
        return np.concatenate([(s - self.state_mean) / self.state_std, a], axis=1)

    def __call__(self, states, actions) -> np.ndarray:
        return self.net(self._inputs(states, actions))[:, 0]

    def value_and_action_grad(self, states, actions) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample ``Q`` and ``dQ/da``."""
        q, tape = self.net.forward(self._inputs(states, actions))
        _, g_in = self.net.backward(tape, np.ones_like(q))
        return q[:, 0], g_in[:, self.state_dim:]

    def regression_loss(self, states, actions, targets) -> tuple[float, list[np.ndarray]]:
        """``0.5 * mean (y - Q(s, a))^2`` and its parameter gradients."""
        q, tape = self.net.forward(self._inputs(states, actions))
        err = q[:, 0] - np.asarray(targets, dtype=np.float64)
        n = len(err)
        if n == 0:
            raise ValueError("critic loss needs a non-empty batch")
        grads, _ = self.net.backward(tape, (err / n)[:, None])
        return 0.5 * float(np.mean(err * err)), grads

    def copy(self) -> "QFunction":
        other = QFunction(self.state_dim, self.action_dim, net=self.net.copy())
        other.state_mean = self.state_mean.copy()
        other.state_std = self.state_std.copy()
        return other

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta, arrays = self.net.to_state()
        arrays = dict(arrays)
        arrays["state_mean"] = self.state_mean
        arrays["state_std"] = self.state_std
        return {"state_dim": self.state_dim, "action_dim": self.action_dim, "net": meta}, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "QFunction":
        net_arrays = {k: v for k, v in arrays.items() if k not in ("state_mean", "state_std")}
        q = cls(meta["state_dim"], meta["action_dim"], net=FeedforwardNetwork.from_state(meta["net"], net_arrays))
        q.state_mean = np.array(arrays["state_mean"])
        q.state_std = np.array(arrays["state_std"])
        return q


def soft_update(live, target, rho: float):
    """``target <- rho * target + (1 - rho) * live`` elementwise, in place.

    Accepts parameter lists, flat arrays, or :class:`QFunction` /
    FeedforwardNetwork objects.  Small ``rho`` tracks the live weights fast.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    live_net = getattr(live, "net", live)
    target_net = getattr(target, "net", target)
    live_p = live_net.parameters() if hasattr(live_net, "parameters") else [live_net]
    target_p = target_net.parameters() if hasattr(target_net, "parameters") else [target_net]
    if len(live_p) != len(target_p) or any(a.shape != b.shape for a, b in zip(live_p, target_p)):
        raise DimensionError("live and target parameters are misaligned")
    for src, dst in zip(live_p, target_p):
        dst *= rho
        dst += (1.0 - rho) * src
    if hasattr(target_net, "mark_updated"):
        target_net.mark_updated()
    return target


def td_target(rewards, next_states, dones, policy, target_critic, gamma: float,
              rng: np.random.Generator | None = None, next_actions=None) -> np.ndarray:
    """``y = r + gamma * (1 - done) * Q_target(s', a')`` with ``a' ~ policy(s')``.

    The entropy bonus of soft actor-critic is left out: the log-density of a
    diffusion policy is intractable.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if gamma == 0.0 or np.all(dones == 1.0):
        return rewards.copy()
    if next_actions is None:
        next_actions = policy.sample(next_states, rng)
    bootstrap = target_critic(next_states, next_actions)
    return rewards + gamma * (1.0 - dones) * bootstrap


def critic_loss(critic: QFunction, target_critic, batch: Batch, policy, gamma: float,
                rng: np.random.Generator | None = None, use_cost: bool = False,
                next_actions=None) -> tuple[float, list[np.ndarray]]:
    """TD regression loss for the reward critic, or the cost critic when ``use_cost``."""
    if len(batch) == 0:
        raise ValueError("critic loss needs a non-empty batch")
    signal = batch.costs if use_cost else batch.rewards
    y = td_target(signal, batch.next_states, batch.dones, policy, target_critic, gamma, rng, next_actions)
    return critic.regression_loss(batch.states, batch.actions, y)


class CriticPair:
    """Reward critic, cost critic, and their target copies."""

    def __init__(self, state_dim: int, action_dim: int = 2, hidden: int = 256, n_hidden: int = 2,
                 rho: float = 0.995, rng: np.random.Generator | None = None):
        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q_reward = QFunction(state_dim, action_dim, hidden, n_hidden, rng)
        self.q_cost = QFunction(state_dim, action_dim, hidden, n_hidden, rng)
        self.target_q_reward = self.q_reward.copy()
        self.target_q_cost = self.q_cost.copy()
        self.rho = rho

    def set_normalizer(self, mean: np.ndarray, std: np.ndarray) -> None:
        for q in (self.q_reward, self.q_cost, self.target_q_reward, self.target_q_cost):
            q.state_mean = np.array(mean, dtype=np.float64)
            q.state_std = np.array(std, dtype=np.float64)

    def update_targets(self) -> None:
        soft_update(self.q_reward, self.target_q_reward, self.rho)
        soft_update(self.q_cost, self.target_q_cost, self.rho)

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta, arrays = {"kind": "critic_pair", "rho": self.rho}, {}
        for name in ("q_reward", "q_cost", "target_q_reward", "target_q_cost"):
            m, a = getattr(self, name).to_state()
            meta[name] = m
            arrays.update({f"{name}/{k}": v for k, v in a.items()})
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "CriticPair":
        pair = cls.__new__(cls)
        pair.rho = meta["rho"]
        for name in ("q_reward", "q_cost", "target_q_reward", "target_q_cost"):
            sub = {k[len(name) + 1:]: v for k, v in arrays.items() if k.startswith(name + "/")}
            setattr(pair, name, QFunction.from_state(meta[name], sub))
        return pair
