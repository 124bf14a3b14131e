"""Clipped-surrogate PPO over the 4-dim continuous mission action space.

Separate actor and critic networks. The actor outputs pre-squash Gaussian
means; per-dimension log-stds are free parameters. Samples are squashed with
tanh onto the declared action ranges, and the log-density carries the
change-of-variables correction. Because the stored pre-squash sample is held
fixed during updates, that correction term is constant in the parameters and
drops out of the gradients, which keeps the manual backward pass small:
backprop reaches the mean head and the log-stds only through the Gaussian
exponent.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .env import ACTION_DIM, ACTION_HIGH, ACTION_LOW, CommEnv
from .nets import Adam, Sequential, TrainingDiverged, mlp, mse_loss

CHECKPOINT_FORMAT_VERSION = 1

_LOG_2PI = math.log(2.0 * math.pi)
_MID = (ACTION_HIGH + ACTION_LOW) / 2.0
_HALF = (ACTION_HIGH - ACTION_LOW) / 2.0
_LOG_HALF_SUM = float(np.sum(np.log(_HALF)))


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lr: float = 1e-5
    clip: float = 0.2
    rollout_len: int = 2048
    update_epochs: int = 10
    minibatch: int = 256
    gae_lambda: float = 0.95
    max_episodes: int = 40000
    hidden: tuple[int, ...] = (256, 256)
    entropy_coef: float = 0.0
    log_std_init: float = -0.5
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip range must be in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("discount factor must be in (0, 1]")


def squash(u: np.ndarray) -> np.ndarray:
    """Map unbounded pre-squash values onto the action ranges."""
    return _MID + _HALF * np.tanh(u)


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    def __init__(self, obs_dim: int, rng: np.random.Generator, config: PpoConfig):
        self.config = config
        self.obs_dim = obs_dim
        self.net = mlp([obs_dim, *config.hidden, ACTION_DIM], rng,
                       activation="tanh", out_scale=0.01)
        self.log_std = np.full(ACTION_DIM, config.log_std_init)
        self.g_log_std = np.zeros(ACTION_DIM)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        mu = self.net.forward(np.atleast_2d(obs), train=False)[0]
        return squash(mu)

    def log_prob(self, mu: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Log-density of the squashed action identified by pre-squash u."""
        mu = np.atleast_2d(mu)
        u = np.atleast_2d(u)
        z = (u - mu) / np.exp(self.log_std)
        gauss = -0.5 * np.sum(z ** 2, axis=1) - np.sum(self.log_std) \
            - 0.5 * ACTION_DIM * _LOG_2PI
        corr = np.sum(_log1m_tanh_sq(u), axis=1) + _LOG_HALF_SUM
        return gauss - corr

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        """Draw an action; returns (env action, pre-squash sample, log-prob)."""
        mu = self.net.forward(np.atleast_2d(obs), train=False)[0]
        u = mu + np.exp(self.log_std) * rng.standard_normal(ACTION_DIM)
        return squash(u), u, float(self.log_prob(mu, u)[0])

    def trainable_arrays(self):
        params = [p for _n, p, _g in self.net.trainables()] + [self.log_std]
        grads = [g for _n, _p, g in self.net.trainables()] + [self.g_log_std]
        return params, grads

    def zero_grads(self):
        self.net.zero_grads()
        self.g_log_std[...] = 0.0


def sample_action(policy: GaussianPolicy, state: np.ndarray,
                  rng: np.random.Generator):
    return policy.sample(state, rng)


def make_value_net(obs_dim: int, rng: np.random.Generator,
                   config: PpoConfig) -> Sequential:
    return mlp([obs_dim, *config.hidden, 1], rng, activation="tanh")


def compute_advantages(rewards, values, dones, last_value: float,
                       gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a rollout segment.

    dones[t] marks transitions whose successor state is terminal; last_value
    bootstraps the state following the final transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = rewards.shape[0]
    adv = np.zeros(n)
    lastgae = 0.0
    for t in reversed(range(n)):
        next_value = last_value if t == n - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        lastgae = delta + gamma * lam * nonterminal * lastgae
        adv[t] = lastgae
    return adv, adv + values


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    u: list = field(default_factory=list)
    log_prob: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    value: list = field(default_factory=list)
    done: list = field(default_factory=list)

    def add(self, obs, u, log_prob, reward, value, done):
        self.obs.append(obs)
        self.u.append(u)
        self.log_prob.append(log_prob)
        self.reward.append(reward)
        self.value.append(value)
        self.done.append(done)

    def __len__(self):
        return len(self.obs)

    def arrays(self):
        return (np.array(self.obs), np.array(self.u), np.array(self.log_prob),
                np.array(self.reward), np.array(self.value),
                np.array(self.done, dtype=float))

    def clear(self):
        for lst in (self.obs, self.u, self.log_prob, self.reward, self.value, self.done):
            lst.clear()


def ppo_update(policy: GaussianPolicy, value_net: Sequential,
               policy_opt: Adam, value_opt: Adam,
               batch: dict, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    """One clipped-surrogate update over the collected segment."""
    obs = batch["obs"]
    u = batch["u"]
    logp_old = batch["log_prob"]
    adv = batch["advantages"]
    returns = batch["returns"]
    n = obs.shape[0]

    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    value_params = [p for _n, p, _g in value_net.trainables()]
    value_grads = [g for _n, _p, g in value_net.trainables()]
    policy_params, policy_grads = policy.trainable_arrays()

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0,
             "approx_kl": 0.0, "updates": 0}
    for _epoch in range(config.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            mb = order[start:start + config.minibatch]
            if mb.size < 2:
                continue
            std = np.exp(policy.log_std)

            policy.zero_grads()
            mu = policy.net.forward(obs[mb], train=True)
            z = (u[mb] - mu) / std
            logp_new = (-0.5 * np.sum(z ** 2, axis=1) - np.sum(policy.log_std)
                        - 0.5 * ACTION_DIM * _LOG_2PI
                        - np.sum(_log1m_tanh_sq(u[mb]), axis=1) - _LOG_HALF_SUM)
            ratio = np.exp(logp_new - logp_old[mb])
            a_mb = adv[mb]
            surr1 = ratio * a_mb
            surr2 = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * a_mb
            policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
            if not np.isfinite(policy_loss):
                raise TrainingDiverged("non-finite policy loss")

            # Gradient flows through the ratio only where the unclipped
            # surrogate is the active minimum.
            active = surr1 <= surr2
            dlogp = np.where(active, -a_mb * ratio, 0.0) / mb.size
            dmu = dlogp[:, None] * z / std
            policy.net.backward(dmu)
            policy.g_log_std += np.sum(dlogp[:, None] * (z ** 2 - 1.0), axis=0)
            if config.entropy_coef:
                policy.g_log_std -= config.entropy_coef
            policy_opt.step(policy_grads)
            np.clip(policy.log_std, config.log_std_min, config.log_std_max,
                    out=policy.log_std)

            value_net.zero_grads()
            vpred = value_net.forward(obs[mb], train=True)[:, 0]
            value_loss, gv = mse_loss(vpred, returns[mb])
            if not np.isfinite(value_loss):
                raise TrainingDiverged("non-finite value loss")
            value_net.backward(gv[:, None])
            value_opt.step(value_grads)

            stats["policy_loss"] += policy_loss
            stats["value_loss"] += value_loss
            stats["clip_fraction"] += float(np.mean(~active))
            stats["approx_kl"] += float(np.mean(logp_old[mb] - logp_new))
            stats["updates"] += 1
    k = max(stats["updates"], 1)
    return {key: v / k if key != "updates" else v for key, v in stats.items()}


@dataclass
class EpisodeStat:
    episode: int
    ret: float
    steps: int
    completion_time_s: float
    success: bool
    punishment_count: int


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value_net: Sequential
    episodes: list[EpisodeStat]
    config: PpoConfig


def train_loop(env_factory: Callable[[], CommEnv], config: PpoConfig,
               progress_every: int = 0,
               progress_cb: Callable[[EpisodeStat], None] | None = None) -> TrainResult:
    """Episode-structured rollout collection with updates every rollout_len steps."""
    env = env_factory()
    policy = GaussianPolicy(env.obs_dim, np.random.default_rng(config.seed + 3), config)
    value_net = make_value_net(env.obs_dim, np.random.default_rng(config.seed + 4), config)
    policy_opt = Adam(policy.trainable_arrays()[0], lr=config.lr)
    value_opt = Adam([p for _n, p, _g in value_net.trainables()], lr=config.lr)

    action_rng = np.random.default_rng(config.seed)
    env_seed_rng = np.random.default_rng(config.seed + 1)
    update_rng = np.random.default_rng(config.seed + 2)

    buffer = RolloutBuffer()
    episodes: list[EpisodeStat] = []
    global_step = 0

    for episode in range(config.max_episodes):
        obs = env.reset(seed=int(env_seed_rng.integers(2 ** 31 - 1)))
        ep_ret = 0.0
        ep_steps = 0
        punishment = 0
        while True:
            action, u, logp = policy.sample(obs, action_rng)
            value = float(value_net.forward(obs[None], train=False)[0, 0])
            res = env.step(action)
            buffer.add(obs, u, logp, res.reward, value, res.terminated)
            ep_ret += res.reward
            ep_steps += 1
            punishment = res.info.punishment_count
            global_step += 1
            obs = res.obs

            if global_step % config.rollout_len == 0:
                last_value = 0.0 if res.terminated else \
                    float(value_net.forward(obs[None], train=False)[0, 0])
                b_obs, b_u, b_logp, b_rew, b_val, b_done = buffer.arrays()
                advantages, returns = compute_advantages(
                    b_rew, b_val, b_done, last_value, config.gamma, config.gae_lambda)
                ppo_update(policy, value_net, policy_opt, value_opt,
                           {"obs": b_obs, "u": b_u, "log_prob": b_logp,
                            "advantages": advantages, "returns": returns},
                           config, update_rng)
                buffer.clear()
            if res.terminated:
                break

        stat = EpisodeStat(episode=episode, ret=ep_ret, steps=ep_steps,
                           completion_time_s=ep_steps * env.cfg.dt,
                           success=env.success, punishment_count=punishment)
        episodes.append(stat)
        if progress_cb is not None:
            progress_cb(stat)
        if progress_every and (episode + 1) % progress_every == 0:
            recent = episodes[-progress_every:]
            print(f"episode {episode + 1}/{config.max_episodes} "
                  f"return={np.mean([e.ret for e in recent]):.3f} "
                  f"time={np.mean([e.completion_time_s for e in recent]):.1f}s "
                  f"success={np.mean([e.success for e in recent]):.2f}")

    return TrainResult(policy=policy, value_net=value_net,
                       episodes=episodes, config=config)


def save_checkpoint(policy: GaussianPolicy, value_net: Sequential,
                    config: PpoConfig, path) -> None:
    arrays = {f"policy/{k}": v for k, v in policy.net.state_dict().items()}
    arrays.update({f"value/{k}": v for k, v in value_net.state_dict().items()})
    arrays["log_std"] = policy.log_std
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "obs_dim": policy.obs_dim,
        "config": {**asdict(config), "hidden": list(config.hidden)},
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[GaussianPolicy, Sequential, PpoConfig]:
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta_json" not in arrays:
        raise ValueError(f"not a policy checkpoint: {path}")
    meta = json.loads(bytes(arrays["meta_json"]).decode())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {meta.get('format_version')}")
    cfg_dict = dict(meta["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    config = PpoConfig(**cfg_dict)
    rng = np.random.default_rng(0)
    policy = GaussianPolicy(meta["obs_dim"], rng, config)
    policy.net.load_state_dict({k.split("/", 1)[1]: v for k, v in arrays.items()
                                if k.startswith("policy/")})
    policy.log_std[...] = arrays["log_std"]
    value_net = make_value_net(meta["obs_dim"], rng, config)
    value_net.load_state_dict({k.split("/", 1)[1]: v for k, v in arrays.items()
                               if k.startswith("value/")})
    return policy, value_net, config
