"""Trajectory collection, advantage estimation and team batch merging."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import Env, EnvSpec
from .numerics import CategoricalOut, ConfigurationError, param_hash, sample_action

_ARRAY_FIELDS = ("obs", "actions", "rewards", "next_obs", "dones", "logp", "behavior", "owner",
                 "values", "next_values", "advantages", "returns", "value_hash")


@dataclass
class TrajectoryBatch:
    """Time-ordered transitions stored column-wise.

    ``behavior`` holds the acting distribution per row: ``[mean, log_std]`` for
    Gaussian policies, logits for categorical ones. ``value_hash`` records
    which value-network snapshot produced each row's advantage.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    logp: np.ndarray
    behavior: np.ndarray
    owner: np.ndarray
    values: np.ndarray | None = None
    next_values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    value_hash: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    env_spec: EnvSpec | None = None

    def __len__(self):
        return len(self.rewards)

    def subset(self, idx):
        kw = {}
        for f in _ARRAY_FIELDS:
            v = getattr(self, f)
            kw[f] = None if v is None else v[idx]
        return replace(self, **kw, episode_returns=[])

    def segment_ends(self):
        """True where a return recursion must stop: episode end, owner switch or batch end."""
        ends = self.dones.astype(bool).copy()
        if len(ends):
            ends[-1] = True
            ends[:-1] |= self.owner[1:] != self.owner[:-1]
        return ends


class EnvRunner:
    """Keeps one environment stepping across successive ``collect`` calls."""

    def __init__(self, env: Env, seed=0, return_window=10):
        self.env = env
        self.seed = seed
        self.obs = env.reset(seed)
        self.ep_return = 0.0
        self.recent_returns = deque(maxlen=return_window)
        self.episodes = 0
        self.env_steps = 0

    def step(self, action):
        res = self.env.step(action)
        self.ep_return += res.reward
        self.env_steps += 1
        if res.done:
            self.recent_returns.append(self.ep_return)
            self.episodes += 1
            self.ep_return = 0.0
            self.obs = self.env.reset(self.seed)
        else:
            self.obs = res.next_obs
        return res

    def mean_return(self):
        return float(np.mean(self.recent_returns)) if self.recent_returns else float("nan")


def collect(policy, params, runner: EnvRunner, n, rng, owner=0):
    """Roll ``policy`` for exactly ``n`` steps, resetting the env on episode end."""
    if n < 1:
        raise ConfigurationError("collect needs n >= 1")
    spec = runner.env.spec
    obs = np.empty((n, spec.obs_dim))
    next_obs = np.empty((n, spec.obs_dim))
    discrete = spec.action_kind == "discrete"
    actions = np.empty(n, dtype=np.int64) if discrete else np.empty((n, spec.action_dim))
    rewards = np.empty(n)
    dones = np.zeros(n, dtype=bool)
    logp = np.empty(n)
    behavior = np.empty((n, spec.action_dim if discrete else 2 * spec.action_dim))
    finished = []
    for t in range(n):
        o = runner.obs
        head, _ = policy.forward(o, params)
        a, lp = sample_action(head, rng)
        episodes_before = runner.episodes
        res = runner.step(a)
        obs[t] = o
        actions[t] = a
        rewards[t] = res.reward
        next_obs[t] = res.next_obs
        dones[t] = res.done
        logp[t] = lp
        if isinstance(head, CategoricalOut):
            behavior[t] = head.logits
        else:
            behavior[t, : spec.action_dim] = head.mean
            behavior[t, spec.action_dim:] = head.log_std
        if runner.episodes > episodes_before:
            finished.append(runner.recent_returns[-1])
    return TrajectoryBatch(obs=obs, actions=actions, rewards=rewards, next_obs=next_obs, dones=dones,
                           logp=logp, behavior=behavior, owner=np.full(n, owner, dtype=np.int64),
                           episode_returns=finished, env_spec=spec)


def one_step_advantage(r, v_s, v_s_next, done, gamma):
    return r + gamma * v_s_next * (1.0 - float(done)) - v_s


def gae(rewards, values, next_values, dones, gamma, lam, segment_ends=None):
    """Generalized advantage estimates by reverse scan.

    ``segment_ends`` marks rows after which the recursion restarts (defaults
    to episode ends plus the final row); bootstrapping there uses
    ``next_values`` unless the row is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if segment_ends is None:
        segment_ends = dones.copy()
        if len(segment_ends):
            segment_ends[-1] = True
    not_done = 1.0 - dones.astype(np.float64)
    deltas = rewards + gamma * np.asarray(next_values) * not_done - np.asarray(values)
    adv = np.empty_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        if segment_ends[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv


def discounted_returns(rewards, gamma, segment_ends, bootstrap=None):
    """Reverse-scan discounted sums restarting at each segment end.

    ``bootstrap`` (optional, per row) is added at segment ends that are not
    episode terminations; pass zeros or ``None`` for no bootstrap.
    """
    out = np.empty(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if segment_ends[t]:
            running = 0.0 if bootstrap is None else bootstrap[t]
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def compute_advantages(batch: TrajectoryBatch, value_net, value_params, gamma, lam):
    """Fill values, advantages and value targets using the owner's value net.

    Value targets are the lambda=1 discounted returns, bootstrapped at
    truncation.
    """
    values, _ = value_net.forward(batch.obs, value_params)
    next_values, _ = value_net.forward(batch.next_obs, value_params)
    ends = batch.segment_ends()
    batch.values = values
    batch.next_values = next_values
    batch.advantages = gae(batch.rewards, values, next_values, batch.dones, gamma, lam, ends)
    boot = np.where(batch.dones, 0.0, next_values)
    batch.returns = discounted_returns(batch.rewards, gamma, ends, boot)
    batch.value_hash = np.full(len(batch), param_hash(value_params), dtype=object)
    return batch


def normalize_advantages(adv, eps=1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ConfigurationError("normalization needs at least two samples")
    return (adv - adv.mean()) / (adv.std() + eps)


def split_counts(total, k):
    """Split ``total`` samples over ``k`` agents, remainder handed out round-robin."""
    if k < 1 or total < k:
        raise ConfigurationError(f"cannot split {total} samples over {k} agents")
    base, rem = divmod(total, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def merge_team_batches(batches):
    """Concatenate per-agent batches, keeping owner tags and frozen advantages."""
    if not batches:
        raise ConfigurationError("nothing to merge")
    specs = {b.env_spec for b in batches}
    if len(specs) > 1:
        raise ConfigurationError("team batches come from different environment specs")
    if len(batches) == 1:
        return batches[0]
    kw = {}
    for f in _ARRAY_FIELDS:
        cols = [getattr(b, f) for b in batches]
        if any(c is None for c in cols):
            if not all(c is None for c in cols):
                raise ConfigurationError(f"field {f!r} missing on some team batches")
            kw[f] = None
        else:
            kw[f] = np.concatenate(cols)
    episodes = [r for b in batches for r in b.episode_returns]
    return TrajectoryBatch(**kw, episode_returns=episodes, env_spec=batches[0].env_spec)

