"""Leader-follower training: decentralised DDPG followers and a PPO leader.

Followers each own an actor and a critic (plus targets). In ``lsd`` mode a
follower's critic sees only its own observation, its own action and the
aggregator observation; in ``centralized`` mode (the conventional MADDPG
comparison) every critic sees all follower observations and actions. Actors
are always local. The leader is a Gaussian PPO policy over the aggregator's
three actions with a separate value network and GAE advantages.

One training step follows the hour structure of :class:`~p2pmarl.env.MarketEnv`:
followers act, the market clears, the leader acts on the partial state, the
hour settles, then the followers (every ``update_every`` steps) and the leader
(every ``t_horizon`` steps) learn.
"""
from __future__ import annotations

import ast
import configparser
import csv
import json
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .env import EnvConfig, MarketEnv
from .kernels import gae
from .neural import AdamState, DenseNet, NumericalError, adam_step, soft_update
from .reports import EpisodeRecorder, EpisodeReport
from .scenario import MarketScenario

log = logging.getLogger(__name__)

CRITIC_MODES = ("lsd", "centralized")
CHECKPOINT_FORMAT = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    total_timesteps: int = 60_000
    episode_length: int = 24
    hidden: tuple = (64, 64)
    critic_mode: str = "lsd"
    reward_scale: float = 0.01
    perturb: bool = True
    # followers
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    noise_rate: float = 0.1
    gamma: float = 0.95
    tau: float = 0.01
    buffer_size: int = 500_000
    batch_size: int = 256
    update_every: int = 1
    # leader
    leader_actor_lr: float = 1e-4
    leader_critic_lr: float = 1e-3
    leader_gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    k_epochs: int = 10
    leader_l2: float = 1e-3
    leader_batch_size: int = 256
    t_horizon: int = 240
    entropy_coef: float = 1e-3
    init_log_std: float = -1.2
    # environment
    env: EnvConfig = field(default_factory=EnvConfig)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.critic_mode not in CRITIC_MODES:
            raise ValueError(f"critic_mode must be one of {CRITIC_MODES}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.env, dict):
            self.env = EnvConfig(**self.env)
        for name in ("total_timesteps", "batch_size", "buffer_size", "update_every", "t_horizon",
                     "k_epochs", "leader_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_ini(cls, path, **overrides) -> "TrainConfig":
        """Read ``[train]`` and ``[env]`` sections; values are Python literals."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        d = {}
        for section, target in (("train", d), ("env", d.setdefault("env", {}))):
            if not cp.has_section(section):
                continue
            for key, raw in cp[section].items():
                try:
                    target[key] = ast.literal_eval(raw)
                except (ValueError, SyntaxError):
                    target[key] = raw
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


# ------------------------------------------------------------------ replay


class ReplayBuffer:
    """FIFO experience store shared by all followers.

    Storage grows on demand up to ``capacity``; once full the oldest
    transition is overwritten. ``append`` is lock-protected so several
    rollout threads may feed one buffer.
    """

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, agg_dim: int,
                 rng: np.random.Generator | None = None):
        self.capacity = int(capacity)
        self.n_agents, self.obs_dim, self.agg_dim = n_agents, obs_dim, agg_dim
        self.rng = rng or np.random.default_rng()
        self._lock = threading.Lock()
        self._alloc = 0
        self._store = {}
        self._grow(min(self.capacity, 1024))
        self.size = 0
        self.head = 0  # next write slot
        self.total_appended = 0

    def _grow(self, new_alloc):
        n, od, ad = self.n_agents, self.obs_dim, self.agg_dim
        shapes = {"obs": (n, od), "act": (n,), "rew": (n,), "next_obs": (n, od),
                  "agg": (ad,), "next_agg": (ad,), "done": (), "order": ()}
        for key, shape in shapes.items():
            dtype = np.int64 if key == "order" else np.float64
            arr = np.zeros((new_alloc,) + shape, dtype=dtype)
            if key in self._store:
                arr[: self._alloc] = self._store[key]
            self._store[key] = arr
        self._alloc = new_alloc

    def __len__(self):
        return self.size

    def append(self, obs, act, rew, next_obs, agg, next_agg, done) -> None:
        with self._lock:
            if self.head >= self._alloc and self._alloc < self.capacity:
                self._grow(min(self.capacity, 2 * self._alloc))
            i = self.head
            s = self._store
            s["obs"][i] = obs
            s["act"][i] = act
            s["rew"][i] = rew
            s["next_obs"][i] = next_obs
            s["agg"][i] = agg
            s["next_agg"][i] = next_agg
            s["done"][i] = float(done)
            s["order"][i] = self.total_appended
            self.total_appended += 1
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> dict:
        idx = self.sample_indices(batch_size)
        return {k: v[idx] for k, v in self._store.items()}


# --------------------------------------------------------------- followers


class FollowerGroup:
    """All prosumer agents; parameters are stacked but never shared."""

    def __init__(self, n_agents: int, obs_dim: int, agg_dim: int, config: TrainConfig,
                 rng: np.random.Generator):
        self.n, self.obs_dim, self.agg_dim = n_agents, obs_dim, agg_dim
        self.mode = config.critic_mode
        self.cfg = config
        h = config.hidden
        self.actor = DenseNet([self.actor_input_dim, *h, 1], "tanh", rng, stack=n_agents, final_scale=0.1)
        self.critic = DenseNet([self.critic_input_dim, *h, 1], "linear", rng, stack=n_agents)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = AdamState.for_params(self.actor.params, config.actor_lr)
        self.critic_opt = AdamState.for_params(self.critic.params, config.critic_lr)

    @property
    def actor_input_dim(self) -> int:
        return self.obs_dim + self.agg_dim

    @property
    def critic_input_dim(self) -> int:
        if self.mode == "lsd":
            return self.obs_dim + self.agg_dim + 1
        return self.n * self.obs_dim + self.agg_dim + self.n

    def action_column(self, i: int) -> int:
        """Column of follower ``i``'s own action inside its critic input."""
        if self.mode == "lsd":
            return self.obs_dim + self.agg_dim
        return self.n * self.obs_dim + self.agg_dim + i

    def actor_inputs(self, obs, agg) -> np.ndarray:
        """``obs`` (B, n, od) and ``agg`` (B, ad) -> stacked (n, B, od + ad)."""
        b = obs.shape[0]
        x = np.empty((self.n, b, self.actor_input_dim))
        x[:, :, : self.obs_dim] = np.swapaxes(obs, 0, 1)
        x[:, :, self.obs_dim:] = agg[None, :, :]
        return x

    def critic_inputs(self, obs, agg, act) -> np.ndarray:
        """``act`` is (B, n); returns stacked (n, B, critic_input_dim)."""
        b = obs.shape[0]
        od, ad = self.obs_dim, self.agg_dim
        x = np.empty((self.n, b, self.critic_input_dim))
        if self.mode == "lsd":
            x[:, :, :od] = np.swapaxes(obs, 0, 1)
            x[:, :, od: od + ad] = agg[None]
            x[:, :, od + ad] = act.T
        else:
            x[:, :, : self.n * od] = obs.reshape(b, -1)[None]
            x[:, :, self.n * od: self.n * od + ad] = agg[None]
            x[:, :, self.n * od + ad:] = act[None]
        return x

    def act(self, obs, agg, noise_scale: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Deterministic actions plus optional Gaussian exploration, clamped to [-1, 1]."""
        x = self.actor_inputs(obs[None], np.asarray(agg)[None])
        a = self.actor(x)[:, 0, 0]
        if noise_scale > 0:
            a = a + rng.normal(0.0, noise_scale * 2.0, size=a.shape)
        return np.clip(a, -1.0, 1.0)

    def critic_targets(self, batch: dict, gamma: float) -> np.ndarray:
        """Bellman targets ``r + gamma (1 - done) Q'(s', mu'(s'), s'_ag)``, shape (n, B)."""
        next_act = self.actor_target(self.actor_inputs(batch["next_obs"], batch["next_agg"]))[:, :, 0].T
        q_next = self.critic_target(self.critic_inputs(batch["next_obs"], batch["next_agg"], next_act))[:, :, 0]
        return batch["rew"].T + gamma * (1.0 - batch["done"])[None, :] * q_next

    def critic_loss(self, batch: dict, y: np.ndarray):
        """Per-agent mean squared Bellman error plus the backward cache."""
        q, cache = self.critic.forward(self.critic_inputs(batch["obs"], batch["agg"], batch["act"]))
        err = q[:, :, 0] - y
        return np.mean(err * err, axis=1), err, cache

    def actor_gradients(self, batch: dict):
        """Deterministic policy gradient of ``-mean Q_i(s_i, mu_i(s_i), s_ag)`` for every actor."""
        b = batch["obs"].shape[0]
        mu, a_cache = self.actor.forward(self.actor_inputs(batch["obs"], batch["agg"]))
        x_critic = self.critic_inputs(batch["obs"], batch["agg"], batch["act"])
        for i in range(self.n):
            x_critic[i, :, self.action_column(i)] = mu[i, :, 0]
        q_pi, c_cache = self.critic.forward(x_critic)
        _, dx = self.critic.backward(c_cache, np.full_like(q_pi, -1.0 / b))
        dmu = np.stack([dx[i, :, self.action_column(i)] for i in range(self.n)])[:, :, None]
        grads, _ = self.actor.backward(a_cache, dmu)
        return grads, -np.mean(q_pi[:, :, 0], axis=1)

    def update(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        """One critic descent + one actor ascent step per follower; returns per-agent losses."""
        cfg = self.cfg
        b = batch["obs"].shape[0]
        y = self.critic_targets(batch, cfg.gamma)
        critic_loss, err, cache = self.critic_loss(batch, y)
        grads, _ = self.critic.backward(cache, (2.0 / b) * err[:, :, None])
        adam_step(self.critic.params, grads, self.critic_opt)

        a_grads, actor_loss = self.actor_gradients(batch)
        adam_step(self.actor.params, a_grads, self.actor_opt)

        soft_update(self.actor_target, self.actor, cfg.tau)
        soft_update(self.critic_target, self.critic, cfg.tau)
        if not (np.all(np.isfinite(critic_loss)) and np.all(np.isfinite(actor_loss))):
            raise NumericalError(f"non-finite follower loss: critic={critic_loss}, actor={actor_loss}")
        return critic_loss, actor_loss

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def optimizers(self) -> dict:
        return {"actor": self.actor_opt, "critic": self.critic_opt}


# ------------------------------------------------------------------ leader


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    """Sum over the last axis of the diagonal Gaussian log-density."""
    z = (x - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def compute_gae(rewards, values, dones, last_value, gamma, lam):
    """Return ``(advantages, value_targets)``; bootstrap is cut at ``done``."""
    adv = gae(rewards, values, dones, last_value, gamma, lam)
    return adv, adv + np.asarray(values, dtype=float)


def clipped_surrogate(ratio, adv, clip_eps):
    """Per-sample ``min(r A, clip(r) A)`` and its derivative with respect to ``r``."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    take_unclipped = unclipped <= clipped
    return np.where(take_unclipped, unclipped, clipped), np.where(take_unclipped, adv, 0.0)


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)

    def add(self, state, action, log_prob, reward, value, done):
        self.states.append(state)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(float(done))


class LeaderPPO:
    def __init__(self, state_dim: int, config: TrainConfig, rng: np.random.Generator, action_dim: int = 3):
        self.cfg = config
        h = config.hidden
        self.policy = DenseNet([state_dim, *h, action_dim], "linear", rng, final_scale=0.1, output_bias=0.5)
        self.log_std = np.full(action_dim, config.init_log_std)
        self.value = DenseNet([state_dim, *h, 1], "linear", rng)
        self.policy_opt = AdamState.for_params(self.policy.params, config.leader_actor_lr,
                                               weight_decay=config.leader_l2)
        self.log_std_opt = AdamState.for_params([self.log_std], config.leader_actor_lr)
        self.value_opt = AdamState.for_params(self.value.params, config.leader_critic_lr,
                                              weight_decay=config.leader_l2)
        self.rollout = Rollout()

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Return ``(env_action, raw_sample, log_prob, value)``; env action clamped to [0, 1]."""
        s = np.asarray(state, dtype=float)[None]
        mean = self.policy(s)[0]
        value = float(self.value(s)[0, 0])
        if deterministic:
            raw = mean
        else:
            raw = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        logp = float(gaussian_log_prob(raw, mean, self.log_std))
        return np.clip(raw, 0.0, 1.0), raw, logp, value

    def state_value(self, state) -> float:
        return float(self.value(np.asarray(state, dtype=float)[None])[0, 0])

    def update(self, rollout: Rollout, last_value: float = 0.0, rng: np.random.Generator | None = None) -> dict:
        """Clipped-surrogate PPO on one collected rollout."""
        cfg = self.cfg
        states = np.array(rollout.states)
        actions = np.array(rollout.actions)
        old_logp = np.array(rollout.log_probs)
        values = np.array(rollout.values)
        adv, targets = compute_gae(np.array(rollout.rewards), values, np.array(rollout.dones),
                                   last_value, cfg.leader_gamma, cfg.gae_lambda)
        if adv.size > 1 and adv.std() > 1e-8:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        else:
            adv = adv - adv.mean()
        n = len(adv)
        mb = min(cfg.leader_batch_size, n)
        rng = rng or np.random.default_rng(0)
        stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0, "first_ratio_max_dev": None}
        n_batches = 0
        for _ in range(cfg.k_epochs):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                s, a, lp_old, A, tgt = states[idx], actions[idx], old_logp[idx], adv[idx], targets[idx]
                bsz = len(idx)

                mean, cache = self.policy.forward(s)
                std = np.exp(self.log_std)
                logp = gaussian_log_prob(a, mean, self.log_std)
                ratio = np.exp(logp - lp_old)
                if stats["first_ratio_max_dev"] is None:
                    stats["first_ratio_max_dev"] = float(np.max(np.abs(ratio - 1.0)))
                surr, dsurr = clipped_surrogate(ratio, A, cfg.clip_eps)
                # minimise -(surrogate + entropy bonus)
                dlogp = -(dsurr * ratio) / bsz
                diff = a - mean
                dmean = dlogp[:, None] * diff / (std * std)
                dlog_std = np.sum(dlogp[:, None] * ((diff / std) ** 2 - 1.0), axis=0) - cfg.entropy_coef
                grads, _ = self.policy.backward(cache, dmean)
                adam_step(self.policy.params, grads, self.policy_opt)
                adam_step([self.log_std], [dlog_std], self.log_std_opt)
                np.clip(self.log_std, -4.0, 0.5, out=self.log_std)

                v, v_cache = self.value.forward(s)
                verr = v[:, 0] - tgt
                v_grads, _ = self.value.backward(v_cache, (verr / bsz)[:, None])
                adam_step(self.value.params, v_grads, self.value_opt)

                stats["policy_loss"] += -float(np.mean(surr))
                stats["value_loss"] += 0.5 * float(np.mean(verr * verr))
                stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
                n_batches += 1
        for k in ("policy_loss", "value_loss", "clip_frac"):
            stats[k] /= max(n_batches, 1)
        if not (math.isfinite(stats["policy_loss"]) and math.isfinite(stats["value_loss"])):
            raise NumericalError(f"non-finite leader loss: {stats}")
        self.policy.check_finite("leader policy")
        self.value.check_finite("leader value")
        return stats

    def networks(self) -> dict:
        return {"policy": self.policy, "value": self.value}

    def optimizers(self) -> dict:
        return {"policy": self.policy_opt, "log_std": self.log_std_opt, "value": self.value_opt}


# --------------------------------------------------------------- policy set


@dataclass
class PolicySet:
    ids: list
    config: TrainConfig
    followers: FollowerGroup
    leader: LeaderPPO

    @classmethod
    def create(cls, scenario: MarketScenario, config: TrainConfig, rng: np.random.Generator) -> "PolicySet":
        n = scenario.n_prosumers
        followers = FollowerGroup(n, MarketEnv.n_prosumer_features, MarketEnv.n_aggregator_features,
                                  config, rng)
        leader = LeaderPPO(MarketEnv.n_aggregator_features, config, rng)
        return cls(list(scenario.ids), config, followers, leader)

    def save(self, path) -> Path:
        """Write an ``.npz`` checkpoint (format version + JSON meta + every array)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"format_version": np.array(CHECKPOINT_FORMAT)}
        meta = {"ids": self.ids, "config": self.config.to_dict(), "package_version": __version__}
        arrays["meta"] = np.array(json.dumps(meta))
        for owner, nets in (("follower", self.followers.networks()), ("leader", self.leader.networks())):
            for name, net in nets.items():
                for i, p in enumerate(net.params):
                    arrays[f"{owner}/{name}/{i}"] = p
        arrays["leader/log_std"] = self.leader.log_std
        for owner, opts in (("follower", self.followers.optimizers()), ("leader", self.leader.optimizers())):
            for name, st in opts.items():
                arrays[f"adam/{owner}/{name}/step"] = np.array(st.step)
                for i, (m, v) in enumerate(zip(st.m, st.v)):
                    arrays[f"adam/{owner}/{name}/m/{i}"] = m
                    arrays[f"adam/{owner}/{name}/v/{i}"] = v
        with open(path, "wb") as fp:
            np.savez(fp, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "PolicySet":
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {version}")
            meta = json.loads(str(data["meta"]))
            config = TrainConfig.from_dict(meta["config"])
            n = len(meta["ids"])
            rng = np.random.default_rng(0)
            followers = FollowerGroup(n, MarketEnv.n_prosumer_features, MarketEnv.n_aggregator_features,
                                      config, rng)
            leader = LeaderPPO(MarketEnv.n_aggregator_features, config, rng)
            for owner, nets in (("follower", followers.networks()), ("leader", leader.networks())):
                for name, net in nets.items():
                    net.params = [data[f"{owner}/{name}/{i}"].copy() for i in range(len(net.params))]
            leader.log_std = data["leader/log_std"].copy()
            for owner, obj in (("follower", followers), ("leader", leader)):
                for name, st in obj.optimizers().items():
                    st.step = int(data[f"adam/{owner}/{name}/step"])
                    st.m = [data[f"adam/{owner}/{name}/m/{i}"].copy() for i in range(len(st.m))]
                    st.v = [data[f"adam/{owner}/{name}/v/{i}"].copy() for i in range(len(st.v))]
            leader.log_std_opt.m = leader.log_std_opt.m[:1]
        return cls(meta["ids"], config, followers, leader)


# ---------------------------------------------------------------- training


@dataclass
class TrainingResult:
    policies: PolicySet
    log: list
    env_time: float
    env_steps: int

    @property
    def env_time_per_step(self) -> float:
        return self.env_time / max(self.env_steps, 1)


def _log_fields(ids):
    return (["episode", "timesteps", "r_ag", "sum_p2p"] + [f"r_{n}" for n in ids]
            + [f"critic_loss_{n}" for n in ids] + [f"actor_loss_{n}" for n in ids]
            + ["leader_policy_loss", "leader_value_loss"])


def write_training_log(rows, fp, ids, config: TrainConfig, critic_input_dim: int) -> None:
    """CSV with a leading ``#`` metadata line (read with ``comment='#'``)."""
    fp.write(f"# critic_mode={config.critic_mode} critic_input_dim={critic_input_dim}\n")
    w = csv.DictWriter(fp, fieldnames=_log_fields(ids))
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train(scenario: MarketScenario, config: TrainConfig | None = None, seed: int = 0,
          checkpoint_dir=None, progress=None) -> TrainingResult:
    """Run the full leader-follower training loop for ``config.total_timesteps`` steps."""
    cfg = config or TrainConfig()
    if cfg.episode_length != scenario.hours:
        raise ValueError(f"episode_length={cfg.episode_length} but scenario has {scenario.hours} hours")
    ss = np.random.SeedSequence(seed)
    init_rng, env_rng, noise_rng, buf_rng, leader_rng, ppo_rng = (np.random.default_rng(s) for s in ss.spawn(6))
    policies = PolicySet.create(scenario, cfg, init_rng)
    followers, leader = policies.followers, policies.leader
    env = MarketEnv(scenario, cfg.env)
    buffer = ReplayBuffer(cfg.buffer_size, env.n, env.n_prosumer_features, env.n_aggregator_features, buf_rng)
    ids = scenario.ids
    scale = cfg.reward_scale

    rows = []
    steps = 0
    episode = 0
    env_time = 0.0
    leader_stats = {"policy_loss": math.nan, "value_loss": math.nan}
    pending_leader_update = False
    try:
        while steps < cfg.total_timesteps:
            episode += 1
            t0 = time.perf_counter()
            obs, agg = env.reset(env_rng, perturb=cfg.perturb)
            env_time += time.perf_counter() - t0
            ep_r = np.zeros(env.n)
            ep_rag = 0.0
            c_losses, a_losses = [], []
            done = False
            while not done and steps < cfg.total_timesteps:
                actions = followers.act(obs, agg, cfg.noise_rate, noise_rng)
                t0 = time.perf_counter()
                agg_star = env.step_followers(actions)
                env_time += time.perf_counter() - t0
                if pending_leader_update:
                    leader_stats = leader.update(leader.rollout, leader.state_value(agg_star), ppo_rng)
                    leader.rollout = Rollout()
                    pending_leader_update = False
                a_ag, raw, logp, value = leader.act(agg_star, leader_rng)
                t0 = time.perf_counter()
                out = env.step_leader(a_ag)
                env_time += time.perf_counter() - t0
                done = out.done
                r = out.reward_vector(ids)
                buffer.append(obs, actions, r * scale, out.prosumer_obs, agg, out.aggregator_obs, done)
                leader.rollout.add(agg_star, raw, logp, out.r_ag * scale, value, done)
                ep_r += r
                ep_rag += out.r_ag
                steps += 1

                if len(buffer) >= cfg.batch_size and steps % cfg.update_every == 0:
                    cl, al = followers.update(buffer.sample(cfg.batch_size))
                    c_losses.append(cl)
                    a_losses.append(al)
                if len(leader.rollout) >= cfg.t_horizon:
                    if done or steps >= cfg.total_timesteps:
                        bootstrap = 0.0 if done else leader.state_value(out.aggregator_obs)
                        leader_stats = leader.update(leader.rollout, bootstrap, ppo_rng)
                        leader.rollout = Rollout()
                    else:
                        pending_leader_update = True
                obs, agg = out.prosumer_obs, out.aggregator_obs

            cl = np.mean(c_losses, axis=0) if c_losses else np.full(env.n, math.nan)
            al = np.mean(a_losses, axis=0) if a_losses else np.full(env.n, math.nan)
            row = {"episode": episode, "timesteps": steps, "r_ag": float(ep_rag), "sum_p2p": float(ep_r.sum())}
            row.update({f"r_{n}": float(ep_r[i]) for i, n in enumerate(ids)})
            row.update({f"critic_loss_{n}": float(cl[i]) for i, n in enumerate(ids)})
            row.update({f"actor_loss_{n}": float(al[i]) for i, n in enumerate(ids)})
            row["leader_policy_loss"] = float(leader_stats["policy_loss"])
            row["leader_value_loss"] = float(leader_stats["value_loss"])
            rows.append(row)
            if c_losses:
                followers.actor.check_finite("follower actors")
                followers.critic.check_finite("follower critics")
            if progress is not None:
                progress(row)
            if checkpoint_dir is not None and cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
                policies.save(Path(checkpoint_dir) / f"checkpoint_ep{episode:05d}.npz")
    except NumericalError as exc:
        if checkpoint_dir is not None:
            dump = Path(checkpoint_dir) / "numerical_failure.npz"
            policies.save(dump)
            with open(dump.with_suffix(".csv"), "w", newline="") as fp:
                write_training_log(rows, fp, ids, cfg, followers.critic_input_dim)
            raise NumericalError(f"{exc} (episode {episode}, step {steps}; state dumped to {dump})") from exc
        raise NumericalError(f"{exc} (episode {episode}, step {steps})") from exc
    return TrainingResult(policies, rows, env_time, steps)


# -------------------------------------------------------------- evaluation


class RandomPolicy:
    """Uniform random actions for every agent (the untrained reference)."""

    def __init__(self, n_agents: int):
        self.n = n_agents

    def follower_actions(self, obs, agg, rng):
        return rng.uniform(-1.0, 1.0, self.n)

    def leader_action(self, state, rng):
        return rng.uniform(0.0, 1.0, 3)


class GreedyPolicy:
    """Noise-free actions from a trained :class:`PolicySet`."""

    def __init__(self, policies: PolicySet):
        self.p = policies

    def follower_actions(self, obs, agg, rng):
        return self.p.followers.act(obs, agg)

    def leader_action(self, state, rng):
        return self.p.leader.act(state, deterministic=True)[0]


def run_episode(policy, scenario: MarketScenario, env_config: EnvConfig | None = None,
                rng: np.random.Generator | None = None, perturb: bool = False,
                strategy: str = "Trained") -> tuple[EpisodeReport, list]:
    """Roll out one day; returns the report and the environment trace."""
    rng = rng or np.random.default_rng(0)
    env = MarketEnv(scenario, env_config)
    obs, agg = env.reset(rng, perturb=perturb)
    rec = EpisodeRecorder(scenario.ids)
    done = False
    while not done:
        agg_star = env.step_followers(policy.follower_actions(obs, agg, rng))
        out = env.step_leader(policy.leader_action(agg_star, rng))
        info = out.info
        rec.add(info["hour"], info["clearing"], info["settlement"], info["payouts"], out.rewards,
                out.r_ag, info["quote"], env.day.forecast_mp[info["hour"]])
        obs, agg, done = out.prosumer_obs, out.aggregator_obs, out.done
    return rec.report(strategy), env.trace


def _episode_job(args):
    policy, scenario, env_config, seed, perturb, strategy = args
    rng = np.random.default_rng(seed)
    return run_episode(policy, scenario, env_config, rng, perturb, strategy)


def evaluate(policy, scenario: MarketScenario, episodes: int = 1, seed: int = 0,
             perturb: bool = False, env_config: EnvConfig | None = None, workers: int = 1,
             strategy: str = "Trained") -> list:
    """Run ``episodes`` independent days; returns ``[(report, trace), ...]``.

    Episode ``k`` draws its perturbation from ``SeedSequence(seed).spawn``'s
    ``k``-th child, so results do not depend on ``workers``.
    """
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    jobs = [(policy, scenario, env_config, s, perturb, strategy) for s in seeds]
    if workers > 1 and episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_episode_job, jobs))
    return [_episode_job(j) for j in jobs]
