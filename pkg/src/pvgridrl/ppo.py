"""Decentralized PPO over per-bus Gaussian policies with one shared critic.

Every controllable bus gets its own 2->4->4->2 tanh actor reading only that
bus's two local observations; there are structurally no cross-bus weights, so
decentralization is exact by construction rather than by masking. A single
2n->64->64->1 critic sees the concatenated observations during training only.
Each actor (plus its learnable log-std pair) has its own Adam optimizer.

Training is vanilla PPO-clip: the importance ratio is the joint one (sum of
per-agent log-prob differences, exponentiated), advantages come from GAE with
terminal bootstrap zero at episode ends, and there is no KL early stopping.
The centralized comparison mode swaps the actor set for one 2n->64->64->2n
network and shares every other line of the training code.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import grid, nn
from .env import (EpisodeConfig, FeederEnv, RewardConfig, run_episode)

LOG_2PI = math.log(2.0 * math.pi)
ACTOR_HIDDEN = (4, 4)
CRITIC_HIDDEN = (64, 64)
ACTOR_HEAD_GAIN = 0.01
LOG_STD_INIT = math.log(0.5)

METRICS_COLUMNS = ("iteration", "env_steps", "mean_episode_reward", "policy_loss",
                   "value_loss", "clip_fraction", "mean_kl", "max_voltage_deviation")


@dataclass
class PpoConfig:
    steps_per_update: int = 2048    # rounded up to whole episodes at collection
    minibatch_size: int = 16
    epochs: int = 10
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    learning_rate: float = nn.ADAM_LR
    normalize_advantages: bool = True
    log_std_init: float = LOG_STD_INIT


@dataclass
class TrainConfig:
    iterations: int = 50
    mode: str = "decentralized"     # or "centralized"
    workers: int = 1
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    check_decentralization: bool = False


class PolicySet:
    """n independent Gaussian actors (or one joint actor in centralized mode).

    Decentralized actors share a stacked parameter layout so act() is a few
    batched einsums over agents; the per-agent nn.Mlp objects are views into
    the same storage, which is what the per-agent optimizers update.
    log-stds are state-independent learnable vectors held outside the MLPs
    (and outside their parameter counts).
    """

    def __init__(self, mode, bus_ids, actors, log_stds):
        if mode not in ("decentralized", "centralized"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.bus_ids = list(bus_ids)
        self.actors = actors
        self.log_stds = log_stds
        if mode == "decentralized":
            self._w = [np.stack([a.weights[l] for a in actors]) for l in range(3)]
            self._b = [np.stack([a.biases[l] for a in actors]) for l in range(3)]
            self._ls = np.stack(log_stds)
            # rebind per-agent parameters as views of the stacked arrays so
            # optimizer updates and act() always agree
            for k, a in enumerate(actors):
                a.weights = [self._w[l][k] for l in range(3)]
                a.biases = [self._b[l][k] for l in range(3)]
                self.log_stds[k] = self._ls[k]

    @classmethod
    def create(cls, model: grid.NetworkModel, mode, rng, log_std_init=LOG_STD_INIT):
        bus_ids = list(model.controllable)
        n = len(bus_ids)
        if mode == "decentralized":
            sizes = [2, *ACTOR_HIDDEN, 2]
            actors = [nn.init_mlp(sizes, rng, out_gain=ACTOR_HEAD_GAIN)
                      for _ in range(n)]
            log_stds = [np.full(2, float(log_std_init)) for _ in range(n)]
        else:
            sizes = [2 * n, *CRITIC_HIDDEN, 2 * n]
            actors = [nn.init_mlp(sizes, rng, out_gain=ACTOR_HEAD_GAIN)]
            log_stds = [np.full(2 * n, float(log_std_init))]
        return cls(mode, bus_ids, actors, log_stds)

    @property
    def n_buses(self):
        return len(self.bus_ids)

    @property
    def n_agents(self):
        return len(self.actors)

    def obs_slice(self, k):
        if self.mode == "centralized":
            return slice(0, 2 * self.n_buses)
        return slice(2 * k, 2 * k + 2)

    def act(self, flat_obs, stochastic, rng=None):
        """(clipped action, per-agent log-probs, raw pre-clip sample).

        Log-probs are of the raw Gaussian sample; the caller stores the raw
        sample so PPO ratios are evaluated where the density was recorded.
        """
        flat_obs = np.asarray(flat_obs, dtype=float)
        if flat_obs.shape != (2 * self.n_buses,):
            raise ValueError(f"expected {2 * self.n_buses} observation entries")
        if self.mode == "decentralized":
            x = flat_obs.reshape(self.n_buses, 2)
            h = np.tanh(np.einsum("nij,nj->ni", self._w[0], x) + self._b[0])
            h = np.tanh(np.einsum("nij,nj->ni", self._w[1], h) + self._b[1])
            mean = np.einsum("nij,nj->ni", self._w[2], h) + self._b[2]
            log_std = self._ls
        else:
            mean, _ = nn.forward(self.actors[0], flat_obs)
            mean = mean.reshape(1, -1)
            log_std = self.log_stds[0].reshape(1, -1)
        std = np.exp(log_std)
        if stochastic:
            raw = mean + std * rng.standard_normal(mean.shape)
        else:
            raw = mean.copy()
        z = (raw - mean) / std
        log_probs = (-0.5 * (z * z) - log_std - 0.5 * LOG_2PI).sum(axis=1)
        return np.clip(raw.reshape(-1), -1.0, 1.0), log_probs, raw.reshape(-1)

    def agent_parameters(self, k):
        """Parameter list the k-th optimizer owns: MLP weights then log-std."""
        return nn.parameters(self.actors[k]) + [self.log_stds[k]]

    def actor_parameter_count(self):
        """MLP parameters only; log-stds are counted separately."""
        return sum(nn.count_parameters(a.sizes) for a in self.actors)

    def log_std_parameter_count(self):
        return sum(ls.size for ls in self.log_stds)


def make_critic(n_buses, rng) -> nn.Mlp:
    return nn.init_mlp([2 * n_buses, *CRITIC_HIDDEN, 1], rng, out_gain=1.0)


class ExperienceBuffer:
    """Flat on-policy store of complete episodes; cleared after each update."""

    def __init__(self):
        self.clear()

    def clear(self):
        self.obs = []
        self.actions = []
        self.log_probs = []
        self.rewards = []
        self.dones = []
        self.values = None
        self.advantages = None
        self.returns = None

    def append(self, obs, action, log_probs, reward, done):
        self.obs.append(np.array(obs, dtype=float))
        self.actions.append(np.array(action, dtype=float))
        self.log_probs.append(np.array(log_probs, dtype=float))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def extend(self, transitions):
        for tr in transitions:
            self.append(*tr)

    def __len__(self):
        return len(self.rewards)

    def stacked(self):
        return (np.stack(self.obs), np.stack(self.actions),
                np.stack(self.log_probs), np.array(self.rewards),
                np.array(self.dones, dtype=bool))

    def episode_returns(self):
        """Sum of system rewards per completed episode, in order."""
        out, acc = [], 0.0
        for r, d in zip(self.rewards, self.dones):
            acc += r
            if d:
                out.append(acc)
                acc = 0.0
        return out


def compute_gae(buffer: ExperienceBuffer, critic: nn.Mlp, gamma, lam,
                normalize=True):
    """GAE advantages and returns for a buffer of complete episodes.

    Terminal bootstrap is zero (finite horizon). Critic values are computed
    here, in one batched forward over the stored observations. Advantages are
    normalized to zero mean and unit variance over the whole batch when
    normalize is set.
    """
    if len(buffer) == 0 or not buffer.dones[-1]:
        raise ValueError("buffer must hold complete episodes (last step not done)")
    obs = np.stack(buffer.obs)
    values, _ = nn.forward(critic, obs)
    values = values[:, 0]
    rewards = np.array(buffer.rewards)
    dones = np.array(buffer.dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        next_v = 0.0 if dones[t] else values[t + 1]
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + (0.0 if dones[t] else gamma * lam * acc)
        adv[t] = acc
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buffer.values = values
    buffer.advantages = adv
    buffer.returns = returns
    return adv, returns


@dataclass
class PpoGrads:
    actors: list       # per agent: nn grads list matching agent_parameters order
    critic: list


def ppo_loss(policy_set: PolicySet, critic: nn.Mlp, minibatch, config: PpoConfig):
    """Clipped-surrogate loss and its exact gradients for one minibatch.

    minibatch: dict with obs (B, 2n), actions (B, 2n raw samples), old_log_probs
    (B, n_agents), advantages (B,), returns (B,). Returns (loss, PpoGrads, aux)
    where aux carries clip_fraction and the KL estimate.
    """
    obs = minibatch["obs"]
    actions = minibatch["actions"]
    adv = minibatch["advantages"]
    rets = minibatch["returns"]
    batch = len(obs)

    new_logp = np.zeros(batch)
    agent_fwd = []
    for k, actor in enumerate(policy_set.actors):
        sl = policy_set.obs_slice(k)
        mean, tape = nn.forward(actor, obs[:, sl])
        log_std = policy_set.log_stds[k]
        std = np.exp(log_std)
        z = (actions[:, sl] - mean) / std
        new_logp += (-0.5 * (z * z) - log_std - 0.5 * LOG_2PI).sum(axis=1)
        agent_fwd.append((tape, z, std))

    log_ratio = new_logp - minibatch["old_log_probs"].sum(axis=1)
    ratio = np.exp(log_ratio)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    policy_loss = -np.minimum(unclipped, clipped).mean()

    v, v_tape = nn.forward(critic, obs)
    v = v[:, 0]
    value_loss = np.mean((v - rets) ** 2)
    entropy = sum(float(np.sum(ls) + 0.5 * len(ls) * (1.0 + LOG_2PI))
                  for ls in policy_set.log_stds)
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    # d(policy_loss)/d(new_logp): the clipped branch is constant in theta, so
    # the gradient flows only where the unclipped branch is active
    active = np.where(adv >= 0.0, ratio <= 1.0 + config.clip_eps,
                      ratio >= 1.0 - config.clip_eps)
    dlogp = -(ratio * adv * active) / batch

    actor_grads = []
    for k, actor in enumerate(policy_set.actors):
        tape, z, std = agent_fwd[k]
        dmean = dlogp[:, None] * (z / std)
        g = nn.grads_list(nn.backward(actor, tape, dmean))
        g_ls = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0) \
            - config.entropy_coef * np.ones_like(policy_set.log_stds[k])
        actor_grads.append(g + [g_ls])

    dv = config.value_coef * 2.0 * (v - rets) / batch
    critic_grads = nn.grads_list(nn.backward(critic, v_tape, dv[:, None]))

    aux = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)),
        "approx_kl": float(np.mean(-log_ratio)),
    }
    return float(loss), PpoGrads(actor_grads, critic_grads), aux


def make_optimizers(policy_set: PolicySet, critic: nn.Mlp, lr):
    actor_opts = [nn.AdamState(policy_set.agent_parameters(k), lr=lr)
                  for k in range(policy_set.n_agents)]
    critic_opt = nn.AdamState(nn.parameters(critic), lr=lr)
    return actor_opts, critic_opt


def update(policy_set: PolicySet, critic: nn.Mlp, buffer: ExperienceBuffer,
           config: PpoConfig, actor_opts, critic_opt, rng):
    """One PPO update: epochs x shuffled minibatches of Adam steps.

    Each actor is stepped by its own optimizer; partial trailing minibatches
    are dropped. The buffer is cleared on the way out. Returns aggregate
    metrics for the metrics file.
    """
    if len(buffer) < config.steps_per_update:
        raise ValueError(
            f"insufficient data: buffer holds {len(buffer)} transitions, "
            f"update needs {config.steps_per_update}")
    compute_gae(buffer, critic, config.gamma, config.gae_lambda,
                config.normalize_advantages)
    obs, actions, old_logps, _, _ = buffer.stacked()
    adv, rets = buffer.advantages, buffer.returns
    episode_returns = buffer.episode_returns()

    n = len(obs)
    # a buffer smaller than one minibatch trains full-batch rather than
    # dropping everything as a trailing partial
    mb = min(config.minibatch_size, n)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0,
            "approx_kl": 0.0}
    batches = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            minibatch = {"obs": obs[idx], "actions": actions[idx],
                         "old_log_probs": old_logps[idx],
                         "advantages": adv[idx], "returns": rets[idx]}
            _, grads, aux = ppo_loss(policy_set, critic, minibatch, config)
            for k in range(policy_set.n_agents):
                nn.adam_step(policy_set.agent_parameters(k), grads.actors[k],
                             actor_opts[k])
            nn.adam_step(nn.parameters(critic), grads.critic, critic_opt)
            for key in ("policy_loss", "value_loss", "clip_fraction"):
                sums[key] += aux[key]
            sums["approx_kl"] += aux["approx_kl"]
            batches += 1
    buffer.clear()
    return {
        "mean_episode_reward": float(np.mean(episode_returns)),
        "policy_loss": sums["policy_loss"] / batches,
        "value_loss": sums["value_loss"] / batches,
        "clip_fraction": sums["clip_fraction"] / batches,
        "mean_kl": sums["approx_kl"] / batches,
    }


def assert_decentralized(policy_set: PolicySet, rng, trials=4):
    """Probe that each agent's action ignores every other agent's inputs.

    Each trial picks one agent and a random nonempty subset of the remaining
    buses, rewrites that subset's observation entries, and demands the chosen
    agent's action slice stays bitwise identical. No-op for centralized mode.
    """
    if policy_set.mode != "decentralized":
        return
    n = policy_set.n_buses
    for _ in range(trials):
        obs = rng.uniform(-2.0, 2.0, size=2 * n)
        base, _, _ = policy_set.act(obs, stochastic=False)
        k = int(rng.integers(n))
        others = [j for j in range(n) if j != k]
        if not others:
            continue
        subset = [j for j in others if rng.random() < 0.5] \
            or [others[int(rng.integers(len(others)))]]
        other = obs.copy()
        for j in subset:
            other[2 * j:2 * j + 2] = rng.uniform(-2.0, 2.0, size=2)
        changed, _, _ = policy_set.act(other, stochastic=False)
        if not np.array_equal(base[2 * k:2 * k + 2], changed[2 * k:2 * k + 2]):
            raise AssertionError(
                f"agent {k} action changed when only other buses' inputs did")


# ---------------------------------------------------------------------------
# rollout collection

def episode_seed(seed, index):
    """Root stream for episode `index` of the run seeded by `seed`.

    A pure function of (seed, index): the stream is identical no matter which
    worker runs the episode, so results are invariant to the worker count.
    """
    return np.random.SeedSequence([int(seed), 2, int(index)])


def _policy_arrays(policy_set: PolicySet):
    blob = {"mode": policy_set.mode, "bus_ids": list(policy_set.bus_ids)}
    arrays = {}
    for k, actor in enumerate(policy_set.actors):
        for l in range(len(actor.weights)):
            arrays[f"a{k}w{l}"] = actor.weights[l].copy()
            arrays[f"a{k}b{l}"] = actor.biases[l].copy()
        arrays[f"ls{k}"] = policy_set.log_stds[k].copy()
    blob["arrays"] = arrays
    blob["n_agents"] = policy_set.n_agents
    return blob


def _policy_from_arrays(blob) -> PolicySet:
    arrays = blob["arrays"]
    actors, log_stds = [], []
    for k in range(blob["n_agents"]):
        weights, biases, l = [], [], 0
        while f"a{k}w{l}" in arrays:
            weights.append(arrays[f"a{k}w{l}"].copy())
            biases.append(arrays[f"a{k}b{l}"].copy())
            l += 1
        actors.append(nn.Mlp.from_params(weights, biases))
        log_stds.append(arrays[f"ls{k}"].copy())
    return PolicySet(blob["mode"], blob["bus_ids"], actors, log_stds)


_WORKER_STATE = {}


def _worker_init(model_doc, reward_cfg, episode_cfg):
    model = grid.from_dict(model_doc)
    _WORKER_STATE["env"] = FeederEnv(model, reward_cfg=reward_cfg,
                                     episode_cfg=episode_cfg, seed=0)


def _worker_episode(args):
    seed, index, policy_blob = args
    env = _WORKER_STATE["env"]
    env.rng = np.random.default_rng(episode_seed(seed, index))
    policy = _policy_from_arrays(policy_blob)
    transitions = []
    stats = run_episode(env, policy, in_training=True, buffer=_ListBuffer(transitions))
    return index, transitions, stats.mean_reward, stats.max_voltage_deviation


class _ListBuffer:
    """Duck-typed buffer capturing transitions as tuples for transport."""

    def __init__(self, sink):
        self._sink = sink

    def append(self, obs, action, log_probs, reward, done):
        self._sink.append((np.array(obs), np.array(action),
                           np.array(log_probs), float(reward), bool(done)))


def collect_rollouts(env, policy_set, buffer, seed, first_episode, n_episodes,
                     pool=None):
    """Run n_episodes and append their transitions to the buffer in order.

    Returns (episode mean rewards, max voltage deviation over the batch).
    The single-process and pooled paths produce identical buffers because
    every episode's RNG stream depends only on (seed, episode index).
    """
    mean_rewards, max_dev = [], 0.0
    indices = range(first_episode, first_episode + n_episodes)
    if pool is None:
        for index in indices:
            env.rng = np.random.default_rng(episode_seed(seed, index))
            stats = run_episode(env, policy_set, in_training=True, buffer=buffer)
            mean_rewards.append(stats.mean_reward)
            max_dev = max(max_dev, stats.max_voltage_deviation)
    else:
        blob = _policy_arrays(policy_set)
        tasks = [(seed, index, blob) for index in indices]
        results = sorted(pool.map(_worker_episode, tasks), key=lambda r: r[0])
        for _, transitions, mean_reward, dev in results:
            buffer.extend(transitions)
            mean_rewards.append(mean_reward)
            max_dev = max(max_dev, dev)
    return mean_rewards, max_dev


# ---------------------------------------------------------------------------
# training driver

@dataclass
class TrainResult:
    policy_set: PolicySet
    critic: nn.Mlp
    actor_opts: list
    critic_opt: nn.AdamState
    metrics: list                # one dict per iteration, METRICS_COLUMNS keys
    rng: np.random.Generator     # update-stream generator, for checkpointing
    env_steps: int
    feasibility_checks: int
    feasibility_violations: int


def train(model: grid.NetworkModel, config: TrainConfig, seed,
          progress=None) -> TrainResult:
    """Full training run; deterministic given (model, config, seed).

    Episode RNG streams are derived from the episode's global index, so the
    result is bitwise identical for any config.workers. A zero iteration
    budget returns the initialized state with empty metrics. progress, if
    given, is called with each iteration's metrics row as it completes.
    """
    rng_init = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    policy_set = PolicySet.create(model, config.mode, rng_init,
                                  config.ppo.log_std_init)
    critic = make_critic(model.n_agents, rng_init)
    actor_opts, critic_opt = make_optimizers(policy_set, critic,
                                             config.ppo.learning_rate)
    rng_update = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))

    env = FeederEnv(model, reward_cfg=config.reward, episode_cfg=config.episode,
                    seed=0)
    horizon = config.episode.horizon
    episodes_per_iter = -(-config.ppo.steps_per_update // horizon)  # ceil
    buffer = ExperienceBuffer()
    metrics = []
    env_steps = 0
    episode_counter = 0
    checks = 0
    violations = 0

    pool = None
    try:
        if config.workers > 1:
            pool = ProcessPoolExecutor(
                max_workers=config.workers, initializer=_worker_init,
                initargs=(grid.to_dict(model), config.reward, config.episode))
        for iteration in range(1, config.iterations + 1):
            mean_rewards, max_dev = collect_rollouts(
                env, policy_set, buffer, seed, episode_counter,
                episodes_per_iter, pool)
            episode_counter += episodes_per_iter
            env_steps += episodes_per_iter * horizon
            stats = update(policy_set, critic, buffer, config.ppo,
                           actor_opts, critic_opt, rng_update)
            if config.check_decentralization:
                probe = np.random.default_rng(
                    np.random.SeedSequence([int(seed), 4, iteration]))
                assert_decentralized(policy_set, probe)
            row = {
                "iteration": iteration,
                "env_steps": env_steps,
                "mean_episode_reward": float(np.mean(mean_rewards)) * horizon,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "clip_fraction": stats["clip_fraction"],
                "mean_kl": stats["mean_kl"],
                "max_voltage_deviation": max_dev,
            }
            metrics.append(row)
            if progress is not None:
                progress(row)
    finally:
        if pool is not None:
            pool.shutdown()
    checks += env.feasibility_checks
    violations += env.feasibility_violations
    return TrainResult(policy_set, critic, actor_opts, critic_opt, metrics,
                       rng_update, env_steps, checks, violations)


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model: grid.NetworkModel, policy_set: PolicySet, n_scenarios, seed,
             reward_cfg=None, episode_cfg=None, collect_traces=False):
    """Deterministic policy rollouts on freshly sampled scenarios.

    Returns (per-scenario rows, aggregate dict, traces). Rows carry the mean
    step reward, worst absolute voltage deviation (any bus, any step), and the
    mean and median of the final-step active power ratios over the
    controllable buses.
    """
    env = FeederEnv(model, reward_cfg=reward_cfg, episode_cfg=episode_cfg, seed=0)
    rows, traces = [], []
    for k in range(int(n_scenarios)):
        env.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, k]))
        stats = run_episode(env, policy_set, in_training=False,
                            collect_trace=collect_traces)
        rows.append({
            "scenario": k,
            "mean_reward": stats.mean_reward,
            "max_voltage_deviation": stats.max_voltage_deviation,
            "mean_power_ratio": float(np.mean(stats.final_power_ratio)),
            "median_power_ratio": float(np.median(stats.final_power_ratio)),
        })
        traces.append(stats.trace)
    aggregate = {
        "scenarios": len(rows),
        "mean_reward": float(np.mean([r["mean_reward"] for r in rows])),
        "max_voltage_deviation": float(max(r["max_voltage_deviation"] for r in rows)),
        "mean_power_ratio": float(np.mean([r["mean_power_ratio"] for r in rows])),
        "median_power_ratio": float(np.median(
            [r["median_power_ratio"] for r in rows])),
    }
    return rows, aggregate, traces


# ---------------------------------------------------------------------------
# checkpoints and metrics files

def save_checkpoint(path, policy_set: PolicySet, critic: nn.Mlp, actor_opts,
                    critic_opt, rng, reward_cfg: RewardConfig = None,
                    episode_cfg: EpisodeConfig = None, extra=None):
    """Serialize policy, critic, optimizer states and RNG state to one file.

    Byte-stable: saving the same state twice yields identical files, and a
    train -> save -> load -> evaluate round trip is bit-for-bit.
    """
    arrays = {}
    for k, actor in enumerate(policy_set.actors):
        for l in range(len(actor.weights)):
            arrays[f"actor/{k}/w{l}"] = actor.weights[l]
            arrays[f"actor/{k}/b{l}"] = actor.biases[l]
        arrays[f"log_std/{k}"] = policy_set.log_stds[k]
    for l in range(len(critic.weights)):
        arrays[f"critic/w{l}"] = critic.weights[l]
        arrays[f"critic/b{l}"] = critic.biases[l]
    for k, opt in enumerate(actor_opts):
        for j, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt/actor/{k}/m{j}"] = m
            arrays[f"opt/actor/{k}/v{j}"] = v
    for j, (m, v) in enumerate(zip(critic_opt.m, critic_opt.v)):
        arrays[f"opt/critic/m{j}"] = m
        arrays[f"opt/critic/v{j}"] = v
    reward_cfg = reward_cfg if reward_cfg is not None else RewardConfig()
    episode_cfg = episode_cfg if episode_cfg is not None else EpisodeConfig()
    mu = reward_cfg.mu
    meta = {
        "mode": policy_set.mode,
        "bus_ids": list(policy_set.bus_ids),
        "actor_sizes": list(policy_set.actors[0].sizes),
        "critic_sizes": list(critic.sizes),
        "actor_parameters": policy_set.actor_parameter_count(),
        "log_std_parameters": policy_set.log_std_parameter_count(),
        "critic_parameters": nn.count_parameters(critic.sizes),
        "opt_t_actor": [opt.t for opt in actor_opts],
        "opt_t_critic": critic_opt.t,
        "learning_rate": critic_opt.lr,
        "rng_state": rng.bit_generator.state,
        "reward": {"delta": reward_cfg.delta,
                   "mu": list(mu) if isinstance(mu, np.ndarray) else mu},
        "episode": asdict(episode_cfg),
    }
    if extra:
        meta["extra"] = extra
    nn.save_arrays(path, arrays, meta)


@dataclass
class CheckpointBundle:
    policy_set: PolicySet
    critic: nn.Mlp
    actor_opts: list
    critic_opt: nn.AdamState
    rng: np.random.Generator
    reward_cfg: RewardConfig
    episode_cfg: EpisodeConfig
    meta: dict


def load_checkpoint(path) -> CheckpointBundle:
    arrays, meta = nn.load_arrays(path)
    mode = meta["mode"]
    n_agents = 1 if mode == "centralized" else len(meta["bus_ids"])
    n_layers = len(meta["actor_sizes"]) - 1
    actors, log_stds = [], []
    for k in range(n_agents):
        weights = [arrays[f"actor/{k}/w{l}"] for l in range(n_layers)]
        biases = [arrays[f"actor/{k}/b{l}"] for l in range(n_layers)]
        actors.append(nn.Mlp.from_params(weights, biases))
        log_stds.append(arrays[f"log_std/{k}"].copy())
    policy_set = PolicySet(mode, meta["bus_ids"], actors, log_stds)
    n_critic = len(meta["critic_sizes"]) - 1
    critic = nn.Mlp.from_params(
        [arrays[f"critic/w{l}"] for l in range(n_critic)],
        [arrays[f"critic/b{l}"] for l in range(n_critic)])
    lr = meta["learning_rate"]
    actor_opts, critic_opt = make_optimizers(policy_set, critic, lr)
    for k, opt in enumerate(actor_opts):
        opt.t = meta["opt_t_actor"][k]
        opt.m = [arrays[f"opt/actor/{k}/m{j}"] for j in range(len(opt.m))]
        opt.v = [arrays[f"opt/actor/{k}/v{j}"] for j in range(len(opt.v))]
    critic_opt.t = meta["opt_t_critic"]
    critic_opt.m = [arrays[f"opt/critic/m{j}"] for j in range(len(critic_opt.m))]
    critic_opt.v = [arrays[f"opt/critic/v{j}"] for j in range(len(critic_opt.v))]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    mu = meta["reward"]["mu"]
    reward_cfg = RewardConfig(delta=meta["reward"]["delta"],
                              mu=np.array(mu) if isinstance(mu, list) else mu)
    episode_cfg = EpisodeConfig(**meta["episode"])
    return CheckpointBundle(policy_set, critic, actor_opts, critic_opt, rng,
                            reward_cfg, episode_cfg, meta)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], float)
                             else row[c] for c in METRICS_COLUMNS])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {"iteration": int(raw["iteration"]),
                   "env_steps": int(raw["env_steps"])}
            for c in METRICS_COLUMNS[2:]:
                row[c] = float(raw[c])
            rows.append(row)
    return rows
