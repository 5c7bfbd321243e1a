"""Proximal policy optimization with a clipped surrogate and GAE advantages."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import Adam, Checkpoint, CriticParams, PolicyParams, gaussian_log_prob, sample_action, save_checkpoint
from .rl_env import StepResult, decode_action

log = logging.getLogger(__name__)


@dataclass
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    rollout_steps: int = 2048
    updates: int = 100
    entropy_coef: float = 0.0
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if min(self.epochs, self.minibatch, self.rollout_steps) < 1 or self.updates < 0:
            raise ValueError("sizes must be >= 1")


class TrainingAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# return / advantage arithmetic

def discounted_return(rewards, gamma: float) -> float:
    """``sum_t gamma**t * r_{t+1}`` over one episode."""
    r = np.asarray(rewards, dtype=float)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap_value: float = 0.0):
    """GAE(gamma, lambda) advantages and value targets for a transition stream.

    ``values[t]`` estimates the state *before* step t; ``dones[t]`` marks the
    end of an episode after step t, which cuts both bootstrapping and the
    advantage recursion.  ``bootstrap_value`` is V of the state after the last
    transition (ignored when that transition is terminal).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    next_value = bootstrap_value
    running = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_value = 0.0
            running = 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, advantage, clip_eps: float):
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantage)


# --------------------------------------------------------------------------
# rollouts

@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap_value: float
    episode_returns: list = field(default_factory=list)
    episode_final: list = field(default_factory=list)  # outcome of each finished episode's last step

    def __len__(self):
        return len(self.rewards)


def collect_rollouts(env, policy: PolicyParams, critic: CriticParams, n_steps: int,
                     rng: np.random.Generator, next_scenario: Callable, gamma: float = 1.0) -> Rollout:
    """Run the stochastic policy for ``n_steps`` transitions.

    ``next_scenario(rng)`` supplies the scenario for every new episode.  The
    sampled quantity is the actor's absolute target; the environment receives
    the increment from the current setpoints.
    """
    states, actions, logps, rewards, values, dones = [], [], [], [], [], []
    ep_returns, ep_final = [], []
    state = env.reset(next_scenario(rng))
    ep_rewards = []
    for _ in range(n_steps):
        mean = policy.mean(state)[0]
        target = sample_action(mean, policy.log_std, rng)
        res: StepResult = env.step(decode_action(target, env.setpoints))
        states.append(state)
        actions.append(target)
        logps.append(gaussian_log_prob(mean, policy.log_std, target))
        values.append(critic.value(state)[0])
        rewards.append(res.reward)
        dones.append(res.done)
        ep_rewards.append(res.reward)
        state = res.next_state
        if res.done:
            ep_returns.append(discounted_return(ep_rewards, gamma))
            ep_final.append(res.info.get("outcome"))
            ep_rewards = []
            state = env.reset(next_scenario(rng))
    bootstrap = 0.0 if dones[-1] else float(critic.value(state)[0])
    return Rollout(np.array(states), np.array(actions), np.array(logps), np.array(rewards),
                   np.array(values), np.array(dones), bootstrap, ep_returns, ep_final)


# --------------------------------------------------------------------------
# update

def ppo_update(policy: PolicyParams, critic: CriticParams, rollout: Rollout, advantages, returns,
               cfg: PpoConfig, actor_opt: Adam, critic_opt: Adam, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch ascent on the clipped surrogate and descent on value MSE."""
    advantages = np.asarray(advantages, dtype=float)
    if cfg.normalize_advantages and len(advantages) > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    returns = np.asarray(returns, dtype=float)
    n = len(advantages)
    obs = rollout.states[:, :policy.obs_dim]
    stats = {"actor_loss": [], "critic_loss": [], "clip_frac": [], "ratio": [], "approx_kl": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            m = len(idx)
            acts = rollout.actions[idx]
            adv = advantages[idx]

            mean, cache = policy.actor.forward(obs[idx], keep=True)
            std_inv = np.exp(-policy.log_std)
            zs = (acts - mean) * std_inv
            logp = np.sum(-0.5 * zs**2 - policy.log_std - 0.5 * np.log(2 * np.pi), axis=1)
            log_ratio = logp - rollout.log_probs[idx]
            ratio = np.exp(log_ratio)
            surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
            # gradient flows only where the unclipped term is the active minimum
            active = (ratio * adv) <= (np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv)
            coef = -(adv * ratio * active) / m  # d loss / d logp
            g_mean = coef[:, None] * zs * std_inv
            g_logstd = (coef[:, None] * (zs**2 - 1.0)).sum(axis=0) - cfg.entropy_coef
            entropy = np.sum(policy.log_std + 0.5 * (1 + np.log(2 * np.pi)))
            actor_loss = -surr.mean() - cfg.entropy_coef * entropy
            grads = policy.actor.backward(cache, g_mean) + [g_logstd]

            v, vcache = critic.net.forward(rollout.states[idx], keep=True)
            err = v[:, 0] - returns[idx]
            critic_loss = np.mean(err**2)
            cgrads = critic.net.backward(vcache, (2.0 * err / m)[:, None])

            if not (np.isfinite(actor_loss) and np.isfinite(critic_loss)
                    and all(np.all(np.isfinite(g)) for g in grads + cgrads)):
                raise FloatingPointError(
                    f"non-finite PPO loss (actor {actor_loss}, critic {critic_loss}, "
                    f"max ratio {np.max(ratio)})")
            actor_opt.step(policy.params(), grads, cfg.actor_lr)
            critic_opt.step(critic.params(), cgrads, cfg.critic_lr)

            stats["actor_loss"].append(actor_loss)
            stats["critic_loss"].append(critic_loss)
            stats["clip_frac"].append(np.mean(np.abs(ratio - 1) > cfg.clip_eps))
            stats["ratio"].append(ratio.mean())
            stats["approx_kl"].append(np.mean((ratio - 1) - log_ratio))
    return {k: float(np.mean(v)) for k, v in stats.items()}


# --------------------------------------------------------------------------
# training loop

LOG_FIELDS = ["update", "mean_return", "actor_loss", "critic_loss", "clip_frac",
              "eval_success_rate", "mean_ratio", "approx_kl", "log_std_mean", "feasible_frac",
              "elapsed_s"]


@dataclass
class TrainResult:
    policy: PolicyParams
    critic: CriticParams
    actor_opt: Adam
    critic_opt: Adam
    log: list[dict]


def train(env, next_scenario: Callable, policy: PolicyParams, critic: CriticParams,
          ppo: PpoConfig | None = None, gae: GaeConfig | None = None, seed: int = 0,
          eval_fn: Callable | None = None, eval_every: int = 10, log_path=None,
          checkpoint_path=None, checkpoint_meta: dict | None = None,
          actor_opt: Adam | None = None, critic_opt: Adam | None = None) -> TrainResult:
    """collect -> GAE -> update, ``ppo.updates`` times.

    ``eval_fn(policy) -> success rate`` runs every ``eval_every`` updates and
    after the last one.  Checkpoints are written after each evaluation; a
    non-finite update raises :class:`TrainingAborted` and leaves the last
    good checkpoint on disk.
    """
    ppo = ppo or PpoConfig()
    gae = gae or GaeConfig()
    rng = np.random.default_rng(seed)
    actor_opt = actor_opt or Adam()
    critic_opt = critic_opt or Adam()
    rows: list[dict] = []
    t0 = time.perf_counter()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()

    def checkpoint():
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, Checkpoint(policy, critic, actor_opt, critic_opt,
                                                        dict(checkpoint_meta or {})))

    try:
        checkpoint()
        for u in range(1, ppo.updates + 1):
            ro = collect_rollouts(env, policy, critic, ppo.rollout_steps, rng, next_scenario, gae.gamma)
            adv, ret = compute_gae(ro.rewards, ro.values, ro.dones, gae.gamma, gae.lam, ro.bootstrap_value)
            try:
                stats = ppo_update(policy, critic, ro, adv, ret, ppo, actor_opt, critic_opt, rng)
            except FloatingPointError as exc:
                raise TrainingAborted(f"update {u}: {exc}") from exc
            if not all(np.all(np.isfinite(p)) for p in policy.params() + critic.params()):
                raise TrainingAborted(f"update {u}: non-finite parameters")
            row = {
                "update": u,
                "mean_return": float(np.mean(ro.episode_returns)) if ro.episode_returns else float("nan"),
                "actor_loss": stats["actor_loss"],
                "critic_loss": stats["critic_loss"],
                "clip_frac": stats["clip_frac"],
                "eval_success_rate": float("nan"),
                "mean_ratio": stats["ratio"],
                "approx_kl": stats["approx_kl"],
                "log_std_mean": float(policy.log_std.mean()),
                "feasible_frac": float(np.mean([o == "feasible" for o in ro.episode_final]))
                if ro.episode_final else float("nan"),
                "elapsed_s": time.perf_counter() - t0,
            }
            if eval_fn is not None and (u % eval_every == 0 or u == ppo.updates):
                row["eval_success_rate"] = float(eval_fn(policy))
                checkpoint()
            elif u == ppo.updates:
                checkpoint()
            rows.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            log.info("update %d: return %.1f feasible %.3f eval %.3f", u, row["mean_return"],
                     row["feasible_frac"], row["eval_success_rate"])
    finally:
        if fh:
            fh.close()
    return TrainResult(policy, critic, actor_opt, critic_opt, rows)


# --------------------------------------------------------------------------
# synthetic check problem

class BanditEnv:
    """One-step continuous bandit with reward ``-(a - optimum)**2``.

    Exposes the same surface as :class:`~gridppo.rl_env.GridEnv` so the
    trainer can run on it unchanged.
    """

    state_dim = 1
    obs_dim = 1
    action_dim = 1

    def __init__(self, optimum: float = 0.7):
        self.optimum = optimum
        self.setpoints = np.zeros(1)

    def reset(self, scenario=None):
        return np.ones(1)

    def step(self, action) -> StepResult:
        a = float(np.asarray(action)[0]) + self.setpoints[0]
        return StepResult(np.ones(1), -(a - self.optimum) ** 2, True, {"outcome": "feasible"})


def bandit_config() -> dict:
    """PPO settings used for the bandit sanity problem."""
    return asdict(PpoConfig(rollout_steps=64, minibatch=32, epochs=10, updates=200,
                            actor_lr=3e-3, critic_lr=1e-2))


# --------------------------------------------------------------------------
# config-file driven training on a grid case

@dataclass
class TrainConfig:
    """Everything a grid training run needs; serializes to a flat-sectioned JSON file."""

    seed: int = 0
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(updates=20))
    gae: GaeConfig = field(default_factory=GaeConfig)
    reward: dict = field(default_factory=dict)  # RewardParams overrides (weights, floor)
    horizon: int = 5
    step_scale: float = 1.0
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    # narrow exploration: the cost optimum sits on a line limit, so wide noise
    # teaches the actor to back away from it
    log_std: float = -3.0
    reset_log_std: bool = True  # overwrite the spread of a pretrained actor with log_std
    eval_every: int = 10
    eval_scenarios: int = 300

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "ppo" in d:
            d["ppo"] = PpoConfig(**d["ppo"])
        if "gae" in d:
            d["gae"] = GaeConfig(**d["gae"])
        for k in ("actor_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def train_on_case(case, train_set, cfg: TrainConfig, policy: PolicyParams | None = None,
                  eval_set=None, log_path=None, checkpoint_path=None) -> TrainResult:
    """PPO on ``case`` with episodes drawn uniformly from ``train_set``.

    The reward is calibrated on ``train_set``.  When ``eval_set`` is given,
    its first ``cfg.eval_scenarios`` scenarios give the periodic success rate.
    """
    from .evaluate import evaluate_agent
    from .rl_env import GridEnv, RewardParams

    if not train_set.scenarios:
        raise ValueError("training set is empty")
    if train_set.calibration is None:
        raise ValueError("training set has no reward calibration")
    rng = np.random.default_rng(cfg.seed)
    reward = RewardParams.from_calibration(train_set.calibration, **cfg.reward)
    env = GridEnv(case, reward=reward, calibration=train_set.calibration, horizon=cfg.horizon,
                  step_scale=cfg.step_scale)
    if policy is None:
        policy = PolicyParams.init(env.obs_dim, env.action_dim, cfg.actor_hidden, cfg.log_std, rng)
    elif cfg.reset_log_std:
        policy = policy.copy()
        policy.log_std[:] = cfg.log_std
    critic = CriticParams.init(env.state_dim, cfg.critic_hidden, rng)
    scenarios = train_set.scenarios

    def next_scenario(r):
        return scenarios[r.integers(len(scenarios))]

    eval_fn = None
    if eval_set is not None and len(eval_set):
        held = eval_set.subset(np.arange(min(cfg.eval_scenarios, len(eval_set))))
        eval_fn = lambda p: evaluate_agent(case, p, held, cfg.horizon).success_rate  # noqa: E731
    meta = {"case_fingerprint": case.fingerprint(), "train_config": cfg.to_dict(),
            "calibration": asdict(train_set.calibration)}
    return train(env, next_scenario, policy, critic, cfg.ppo, cfg.gae, seed=cfg.seed,
                 eval_fn=eval_fn, eval_every=cfg.eval_every, log_path=log_path,
                 checkpoint_path=checkpoint_path, checkpoint_meta=meta)
