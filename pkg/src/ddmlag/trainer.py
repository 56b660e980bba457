"""Offline training loop: diffusion actor, reward/cost critics, PID multiplier.

Every epoch takes one gradient step per network on a fresh minibatch.  The
actor minimizes

    L_d - (eta / mean|Q|) * mean Q(s, a0) + lam * mean(Q_C(s, a0) - d)

where ``a0`` is drawn through the full reverse chain, so both critic terms
backpropagate through every denoising step.  The multiplier ``lam`` is
updated by the PID controller from the mean cost of evaluation rollouts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .checkpoint import prefixed, save_checkpoint
from .critics import CriticPair, critic_loss, soft_update
from .diffusion import DiffusionPolicy, bc_loss, build_schedule, guidance_scale
from .driveworld import DriveWorld, Scenario
from .evaluation import policy_actor, rollout
from .expert import TrajectoryDataset
from .lagrangian import PidState, update_lambda
from .numgrad import Adam, add_grads

ABLATIONS = ("none", "bc-only", "no-lag")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 256
    gamma: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 3e-4
    rho: float = 0.995
    n_steps: int = 5
    beta_min: float = 0.1
    beta_max: float = 10.0
    hidden: int = 256
    eta: float = 1.0
    kp: float = 0.1
    ki: float = 0.003
    kd: float = 0.001
    cost_limit: float = 10.0
    lambda_init: float = 0.0
    eval_interval: int = 100
    eval_episodes: int = 10
    seed: int = 0
    ablation: str = "none"
    # reserved for an approximation of the entropy bonus; must stay 0
    entropy_weight: float = 0.0

    def __post_init__(self):
        positive = ("epochs", "batch_size", "actor_lr", "critic_lr", "n_steps", "beta_min", "beta_max",
                    "hidden", "eval_interval", "eval_episodes")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.beta_min > self.beta_max:
            raise ConfigError("beta_min must not exceed beta_max")
        if min(self.eta, self.kp, self.ki, self.kd, self.cost_limit, self.lambda_init) < 0.0:
            raise ConfigError("eta, PID gains, cost_limit and lambda_init must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.entropy_weight != 0.0:
            raise ConfigError("entropy_weight is reserved; the entropy bonus is not implemented")

    def effective(self) -> "TrainConfig":
        """Apply the ablation: ``bc-only`` drops guidance and multiplier, ``no-lag`` the multiplier."""
        if self.ablation == "bc-only":
            return replace(self, eta=0.0, kp=0.0, ki=0.0, kd=0.0, lambda_init=0.0)
        if self.ablation == "no-lag":
            return replace(self, kp=0.0, ki=0.0, kd=0.0, lambda_init=0.0)
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        defaults = cls()
        cast = {}
        for key, value in values.items():
            cast[key] = type(getattr(defaults, key))(value)
        return cls(**cast)


REPORT_FIELDS = [
    "epoch", "bc_loss", "q_loss", "lag_term", "cost_q", "critic_loss", "cost_critic_loss",
    "lambda", "delta", "integral", "derivative", "evaluated", "eval_reward", "eval_cost",
]


@dataclass
class TrainReport:
    rows: list[dict]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in REPORT_FIELDS[1:]])


def lagrangian_objective(bc_grads, q_grads, cost_grads, lam: float) -> list[np.ndarray]:
    """Combined actor gradient ``grad L_d + grad L_q + lam * grad mean Q_C(s, a0)``."""
    if not lam >= 0.0:
        raise ValueError(f"Lagrange multiplier must be non-negative, got {lam}")
    g = add_grads(bc_grads, q_grads)
    if lam == 0.0 or cost_grads is None:
        return g
    return add_grads(g, cost_grads, lam)


def cost_penalty(policy: DiffusionPolicy, cost_critic, states, chain, cost_limit: float) -> tuple[float, list]:
    """``mean(Q_C(s, a0) - d)`` and its actor gradient through ``chain``."""
    qc, dqc = cost_critic.value_and_action_grad(states, chain.action)
    return float(np.mean(qc)) - cost_limit, chain.backward(dqc / len(qc))


@dataclass
class ActorStep:
    bc_loss: float
    q_loss: float
    cost_q: float  # mean(Q_C(s, a0)) - d
    grads: list[np.ndarray]


def actor_gradient(policy: DiffusionPolicy, critics: CriticPair, states, actions, eta: float, lam: float,
                   cost_limit: float, bc_rng: np.random.Generator, chain_rng: np.random.Generator,
                   with_cost: bool = True) -> ActorStep:
    """Losses and combined gradient for one actor update.

    Equal to :func:`lagrangian_objective` applied to the separately computed
    component gradients, but the reverse chain is backpropagated once: the
    chain backward is linear in ``dL/da0``, so the reward and cost terms are
    summed at the action before the pass.
    """
    l_d, g_d = bc_loss(policy, states, actions, bc_rng)
    if eta == 0.0 and not with_cost:
        return ActorStep(l_d, 0.0, 0.0, g_d)
    if lam < 0.0:
        raise ValueError(f"Lagrange multiplier must be non-negative, got {lam}")
    chain = policy.sample_chain(states, chain_rng)
    n = len(chain.action)
    action_grad = np.zeros_like(chain.action)
    l_q = cost_q = 0.0
    if eta > 0.0:
        q, dq = critics.q_reward.value_and_action_grad(states, chain.action)
        alpha = guidance_scale(eta, q)
        l_q = -alpha * float(np.mean(q))
        action_grad -= alpha * dq / n
    if with_cost:
        if lam > 0.0:
            qc, dqc = critics.q_cost.value_and_action_grad(states, chain.action)
            action_grad += lam * dqc / n
        else:
            qc = critics.q_cost(states, chain.action)
        cost_q = float(np.mean(qc)) - cost_limit
    return ActorStep(l_d, l_q, cost_q, add_grads(g_d, chain.backward(action_grad)))


@dataclass
class TrainResult:
    policy: DiffusionPolicy
    target_policy: DiffusionPolicy
    critics: CriticPair
    report: TrainReport
    actor_opt: Adam
    reward_opt: Adam
    cost_opt: Adam
    pid: PidState
    config: TrainConfig

    def save(self, policy_path, critics_path) -> None:
        meta, arrays = self.policy.to_state()
        tmeta, tarrays = self.target_policy.to_state()
        ometa, oarrays = self.actor_opt.to_state()
        save_checkpoint(policy_path, {"policy": meta, "target_policy": tmeta, "optimizer": ometa,
                                      "config": asdict(self.config), "pid": asdict(self.pid)},
                        {**prefixed("policy", arrays), **prefixed("target_policy", tarrays),
                         **prefixed("optimizer", oarrays)})
        cmeta, carrays = self.critics.to_state()
        rmeta, rarrays = self.reward_opt.to_state()
        kmeta, karrays = self.cost_opt.to_state()
        save_checkpoint(critics_path, {"critics": cmeta, "reward_optimizer": rmeta, "cost_optimizer": kmeta},
                        {**prefixed("critics", carrays), **prefixed("reward_optimizer", rarrays),
                         **prefixed("cost_optimizer", karrays)})


def _check(value: float, epoch: int, name: str) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} at epoch {epoch}")
    return value


def evaluation_cost(policy: DiffusionPolicy, scenario: Scenario, episodes: int, seed: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Mean undiscounted episode reward and cost over ``episodes`` rollouts."""
    records = rollout(policy_actor(policy, rng), scenario, [seed + k for k in range(episodes)])
    return (float(np.mean([r.total_reward for r in records])),
            float(np.mean([r.total_cost for r in records])))


def train(dataset: TrajectoryDataset, config: TrainConfig, scenario: Scenario | None = None,
          log=None) -> TrainResult:
    """Run the full training loop; ``scenario`` is required unless evaluation is never due.

    Randomness is split into independent streams (minibatches, diffusion
    noise for the BC loss, actor chain samples, critic next-action samples,
    evaluation), so disabling a component leaves the other streams intact.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    cfg = config.effective()
    needs_eval = cfg.epochs >= cfg.eval_interval
    if needs_eval and scenario is None:
        raise ConfigError("a scenario is needed for evaluation rollouts")
    obs_dim, act_dim = dataset.obs_dim, dataset.action_dim
    if scenario is not None:
        world_dim = DriveWorld(scenario).obs_dim
        if world_dim != obs_dim:
            raise ConfigError(f"dataset observation dim {obs_dim} != scenario observation dim {world_dim}")

    root = np.random.SeedSequence(cfg.seed)
    init_rng, batch_rng, bc_rng, chain_rng, next_rng, eval_rng = (
        np.random.default_rng(s) for s in root.spawn(6))
    schedule = build_schedule(cfg.n_steps, cfg.beta_min, cfg.beta_max)
    policy = DiffusionPolicy(obs_dim, act_dim, schedule, hidden=cfg.hidden, rng=init_rng)
    critics = CriticPair(obs_dim, act_dim, hidden=cfg.hidden, rho=cfg.rho, rng=init_rng)
    mean, std = dataset.state_stats()
    policy.state_mean, policy.state_std = mean.copy(), std.copy()
    critics.set_normalizer(mean, std)
    target_policy = policy.copy()

    actor_opt = Adam(policy.eps_net, cfg.actor_lr)
    reward_opt = Adam(critics.q_reward.net, cfg.critic_lr)
    cost_opt = Adam(critics.q_cost.net, cfg.critic_lr)
    pid = PidState(cfg.kp, cfg.ki, cfg.kd, cfg.cost_limit, lam=cfg.lambda_init)
    train_critics = cfg.ablation != "bc-only"
    lag_enabled = max(cfg.kp, cfg.ki, cfg.kd, cfg.lambda_init) > 0.0

    rows = []
    eval_reward = eval_cost = 0.0
    eval_round = 0
    for epoch in range(cfg.epochs):
        batch = dataset.sample(batch_rng, cfg.batch_size)
        lam = pid.lam

        # actor
        step = actor_gradient(policy, critics, batch.states, batch.actions, cfg.eta, lam,
                              cfg.cost_limit, bc_rng, chain_rng, with_cost=lag_enabled)
        l_d, l_q, cost_q, grads = step.bc_loss, step.q_loss, step.cost_q, step.grads
        _check(l_d, epoch, "bc_loss")
        _check(l_q, epoch, "q_loss")
        _check(cost_q, epoch, "cost_q")
        actor_opt.step(grads)

        # critics, sharing one next-action sample
        lr_loss = lc_loss = 0.0
        if train_critics:
            next_a = policy.sample(batch.next_states, next_rng)
            lr_loss, gr = critic_loss(critics.q_reward, critics.target_q_reward, batch, policy, cfg.gamma,
                                      next_actions=next_a)
            lc_loss, gc = critic_loss(critics.q_cost, critics.target_q_cost, batch, policy, cfg.gamma,
                                      use_cost=True, next_actions=next_a)
            _check(lr_loss, epoch, "critic_loss")
            _check(lc_loss, epoch, "cost_critic_loss")
            reward_opt.step(gr)
            cost_opt.step(gc)

        # multiplier from evaluation rollouts
        evaluated = (epoch + 1) % cfg.eval_interval == 0
        if evaluated:
            eval_seed = cfg.seed * 100_003 + eval_round * cfg.eval_episodes
            eval_reward, eval_cost = evaluation_cost(policy, scenario, cfg.eval_episodes, eval_seed, eval_rng)
            eval_round += 1
            pid = update_lambda(pid, eval_cost)

        # targets
        if train_critics:
            critics.update_targets()
        soft_update(policy.eps_net, target_policy.eps_net, cfg.rho)

        rows.append({
            "epoch": epoch, "bc_loss": l_d, "q_loss": l_q, "lag_term": lam * cost_q, "cost_q": cost_q,
            "critic_loss": lr_loss, "cost_critic_loss": lc_loss, "lambda": pid.lam, "delta": pid.delta,
            "integral": pid.integral, "derivative": pid.derivative, "evaluated": float(evaluated),
            "eval_reward": eval_reward, "eval_cost": eval_cost,
        })
        if log is not None and evaluated:
            log(f"epoch {epoch + 1}: bc {l_d:.4f} q {l_q:.4f} lam {pid.lam:.4f} "
                f"eval reward {eval_reward:.2f} cost {eval_cost:.3f}")

    return TrainResult(policy, target_policy, critics, TrainReport(rows), actor_opt, reward_opt, cost_opt,
                       pid, config)
