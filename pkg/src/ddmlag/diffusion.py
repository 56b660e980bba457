"""Conditional diffusion actor.

The action distribution is the terminal sample of a short DDPM reverse chain
conditioned on the state.  Training uses the noise-prediction (behaviour
cloning) loss plus a critic-guided term whose gradient is propagated back
through every reverse step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numgrad import Activation, FeedforwardNetwork, add_grads, zero_grads


class ConfigurationError(ValueError):
    pass


class StepError(IndexError):
    pass


@dataclass(frozen=True)
class VarianceSchedule:
    """beta/alpha/alpha_bar for steps ``i = 1..N``; arrays are indexed by ``i - 1``."""

    n_steps: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_step(self, i: int) -> None:
        if not 1 <= i <= self.n_steps:
            raise StepError(f"diffusion step {i} outside 1..{self.n_steps}")

    def beta(self, i: int) -> float:
        self.check_step(i)
        return float(self.betas[i - 1])

    def alpha(self, i: int) -> float:
        self.check_step(i)
        return float(self.alphas[i - 1])

    def alpha_bar(self, i: int) -> float:
        self.check_step(i)
        return float(self.alpha_bars[i - 1])


def build_schedule(n_steps: int, beta_min: float = 0.1, beta_max: float = 10.0) -> VarianceSchedule:
    """Variance-preserving schedule ``beta_i = 1 - exp(-beta_min/N - (2i-1)/(2N^2) (beta_max - beta_min))``."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps}")
    if not (0.0 < beta_min <= beta_max) or not np.isfinite(beta_max):
        raise ConfigurationError(f"need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}")
    n = int(n_steps)
    i = np.arange(1, n + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / n - (2.0 * i - 1.0) / (2.0 * n * n) * (beta_max - beta_min))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return VarianceSchedule(n, float(beta_min), float(beta_max), betas, alphas, alpha_bars)


def timestep_embedding(steps, dim: int = 16) -> np.ndarray:
    """Sinusoidal encoding of diffusion indices; returns ``[len(steps), dim]``."""
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb


def forward_noise(a0, i: int, eps, schedule: VarianceSchedule) -> np.ndarray:
    """Closed-form sample of ``a_i`` given ``a_0`` and standard-normal ``eps``."""
    ab = schedule.alpha_bar(i)
    return np.sqrt(ab) * np.asarray(a0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def forward_kernel(a_prev, i: int, eps, schedule: VarianceSchedule) -> np.ndarray:
    """One forward transition ``a_{i-1} -> a_i``."""
    b = schedule.beta(i)
    return np.sqrt(1.0 - b) * np.asarray(a_prev, dtype=np.float64) + np.sqrt(b) * np.asarray(eps, dtype=np.float64)


class DiffusionPolicy:
    """Noise-prediction network plus schedule.

    ``eps_net`` maps ``concat(a_i, normalized s, emb(i))`` to predicted noise.
    States are standardized with ``state_mean``/``state_std`` (identity until
    the trainer fits them to a dataset).
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int = 2,
        schedule: VarianceSchedule | None = None,
        hidden: int = 256,
        n_hidden: int = 2,
        emb_dim: int = 16,
        rng: np.random.Generator | None = None,
        eps_net: FeedforwardNetwork | None = None,
        max_action: float = 1.0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.schedule = schedule if schedule is not None else build_schedule(5)
        self.emb_dim = emb_dim
        self.max_action = max_action
        in_dim = action_dim + state_dim + emb_dim
        if eps_net is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            eps_net = FeedforwardNetwork.build(
                [in_dim] + [hidden] * n_hidden + [action_dim], rng, hidden=Activation.MISH
            )
        if eps_net.in_dim != in_dim or eps_net.out_dim != action_dim:
            raise ConfigurationError(
                f"eps_net must map {in_dim} -> {action_dim}, got {eps_net.in_dim} -> {eps_net.out_dim}"
            )
        self.eps_net = eps_net
        self.state_mean = np.zeros(state_dim)
        self.state_std = np.ones(state_dim)
        self._emb_table = timestep_embedding(np.arange(1, self.schedule.n_steps + 1), emb_dim)

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    def normalize(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.shape[1] != self.state_dim:
            raise ConfigurationError(f"state dim {s.shape[1]} != policy state dim {self.state_dim}")
        return (s - self.state_mean) / self.state_std

    def _net_input(self, a, s_norm, steps) -> np.ndarray:
        steps = np.broadcast_to(np.asarray(steps, dtype=np.int64), (len(a),))
        if steps.min() < 1 or steps.max() > self.n_steps:
            raise StepError(f"diffusion step outside 1..{self.n_steps}")
        return np.concatenate([a, s_norm, self._emb_table[steps - 1]], axis=1)

    def predict_noise(self, a, states, steps) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return self.eps_net(self._net_input(a, self.normalize(states), steps))

    def step_coefficients(self, i: int) -> tuple[float, float, float]:
        """``(1/sqrt(alpha_i), beta_i/sqrt(alpha_i (1 - alpha_bar_i)), sqrt(beta_i))``."""
        al, b, ab = self.schedule.alpha(i), self.schedule.beta(i), self.schedule.alpha_bar(i)
        return 1.0 / np.sqrt(al), b / np.sqrt(al * (1.0 - ab)), np.sqrt(b)

    def sample(self, states, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
        """Run the full reverse chain for a batch of states; returns ``[B, action_dim]``."""
        s_norm = self.normalize(states)
        a = rng.standard_normal((len(s_norm), self.action_dim))
        for i in range(self.n_steps, 0, -1):
            noise = rng.standard_normal(a.shape) if i > 1 else None
            c_in, c_eps, sigma = self.step_coefficients(i)
            eps_hat = self.eps_net(self._net_input(a, s_norm, i))
            a = c_in * a - c_eps * eps_hat
            if noise is not None:
                a = a + sigma * noise
        return np.clip(a, -self.max_action, self.max_action) if clip else a

    def sample_chain(self, states, rng: np.random.Generator) -> "ChainSample":
        """Like :meth:`sample` but keeps every tape for backpropagation.

        Draws random numbers in exactly the same order as :meth:`sample`.
        """
        s_norm = self.normalize(states)
        a = rng.standard_normal((len(s_norm), self.action_dim))
        tapes = []
        for i in range(self.n_steps, 0, -1):
            noise = rng.standard_normal(a.shape) if i > 1 else None
            c_in, c_eps, sigma = self.step_coefficients(i)
            eps_hat, tape = self.eps_net.forward(self._net_input(a, s_norm, i))
            tapes.append((i, tape))
            a = c_in * a - c_eps * eps_hat
            if noise is not None:
                a = a + sigma * noise
        raw = a
        action = np.clip(raw, -self.max_action, self.max_action)
        mask = (np.abs(raw) <= self.max_action).astype(np.float64)
        return ChainSample(self, action, mask, tapes)

    def copy(self) -> "DiffusionPolicy":
        other = DiffusionPolicy(
            self.state_dim, self.action_dim, self.schedule, emb_dim=self.emb_dim,
            eps_net=self.eps_net.copy(), max_action=self.max_action,
        )
        other.state_mean = self.state_mean.copy()
        other.state_std = self.state_std.copy()
        return other

    def to_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        net_meta, net_arrays = self.eps_net.to_state()
        meta = {
            "kind": "diffusion_policy",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_steps": self.schedule.n_steps,
            "beta_min": self.schedule.beta_min,
            "beta_max": self.schedule.beta_max,
            "emb_dim": self.emb_dim,
            "max_action": self.max_action,
            "eps_net": net_meta,
        }
        arrays = {f"eps_net/{k}": v for k, v in net_arrays.items()}
        arrays["state_mean"] = self.state_mean
        arrays["state_std"] = self.state_std
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "DiffusionPolicy":
        net = FeedforwardNetwork.from_state(
            meta["eps_net"], {k[len("eps_net/"):]: v for k, v in arrays.items() if k.startswith("eps_net/")}
        )
        policy = cls(
            meta["state_dim"], meta["action_dim"],
            build_schedule(meta["n_steps"], meta["beta_min"], meta["beta_max"]),
            emb_dim=meta["emb_dim"], eps_net=net, max_action=meta["max_action"],
        )
        policy.state_mean = np.array(arrays["state_mean"])
        policy.state_std = np.array(arrays["state_std"])
        return policy


@dataclass
class ChainSample:
    """A reverse-chain sample with its tapes; ``action`` is the clipped ``a_0``."""

    policy: DiffusionPolicy
    action: np.ndarray
    inside_box: np.ndarray
    tapes: list

    def backward(self, action_gradient: np.ndarray) -> list[np.ndarray]:
        """Parameter gradient of a loss with ``dL/da_0 = action_gradient``.

        Clipped components pass no gradient.
        """
        policy = self.policy
        net = policy.eps_net
        g = np.asarray(action_gradient, dtype=np.float64) * self.inside_box
        grads = zero_grads(net)
        # tapes run i = N..1; walk them backwards (i = 1..N)
        for i, tape in reversed(self.tapes):
            c_in, c_eps, _ = policy.step_coefficients(i)
            step_grads, g_input = net.backward(tape, -c_eps * g)
            grads = add_grads(grads, step_grads)
            g = c_in * g + g_input[:, : policy.action_dim]
        return grads


def reverse_step(a_i, states, i: int, policy: DiffusionPolicy, noise=None) -> np.ndarray:
    """One reverse transition ``a_i -> a_{i-1}``; ``noise`` is ignored when ``i == 1``."""
    policy.schedule.check_step(i)
    a_i = np.atleast_2d(np.asarray(a_i, dtype=np.float64))
    c_in, c_eps, sigma = policy.step_coefficients(i)
    out = c_in * a_i - c_eps * policy.predict_noise(a_i, states, i)
    if i > 1 and noise is not None:
        out = out + sigma * np.atleast_2d(np.asarray(noise, dtype=np.float64))
    return out


def sample_action(states, policy: DiffusionPolicy, rng: np.random.Generator) -> np.ndarray:
    s = np.asarray(states, dtype=np.float64)
    out = policy.sample(s, rng)
    return out[0] if s.ndim == 1 else out


def bc_loss(
    policy: DiffusionPolicy,
    states,
    actions,
    rng: np.random.Generator | None = None,
    steps=None,
    noise=None,
) -> tuple[float, list[np.ndarray]]:
    """Noise-prediction loss averaged over the batch, with parameter gradients.

    ``steps`` (per-sample diffusion index) and ``noise`` may be supplied for
    reproducibility; otherwise they are drawn from ``rng``.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    batch = len(actions)
    if batch == 0:
        raise ValueError("bc_loss needs a non-empty batch")
    if steps is None:
        steps = rng.integers(1, policy.n_steps + 1, size=batch)
    if noise is None:
        noise = rng.standard_normal(actions.shape)
    steps = np.asarray(steps)
    ab = policy.schedule.alpha_bars[steps - 1][:, None]
    noisy = np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * noise
    eps_hat, tape = policy.eps_net.forward(policy._net_input(noisy, policy.normalize(states), steps))
    diff = eps_hat - noise
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads, _ = policy.eps_net.backward(tape, 2.0 * diff / batch)
    return loss, grads


def guidance_scale(eta: float, q_values: np.ndarray) -> float:
    """Guidance weight ``eta / mean|Q|`` (zero when eta is zero)."""
    if eta == 0.0:
        return 0.0
    return float(eta / max(np.mean(np.abs(q_values)), 1e-8))


def q_guidance_loss(
    policy: DiffusionPolicy,
    critic,
    states,
    alpha_scale: float,
    rng: np.random.Generator | None = None,
    chain: ChainSample | None = None,
) -> tuple[float, list[np.ndarray]]:
    """``-alpha_scale * mean Q(s, a_0)`` with gradients through the whole chain.

    ``critic`` needs ``value_and_action_grad(states, actions) -> (q, dq/da)``.
    """
    if alpha_scale == 0.0:
        return 0.0, zero_grads(policy.eps_net)
    if chain is None:
        chain = policy.sample_chain(states, rng)
    q, dq = critic.value_and_action_grad(states, chain.action)
    batch = len(q)
    loss = -alpha_scale * float(np.mean(q))
    return loss, chain.backward(-alpha_scale * dq / batch)
