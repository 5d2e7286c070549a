"""Off-policy team trainer built on soft actor-critic.

Collaborative exploration comes in two flavours: ``share_batch`` draws one
batch (an equal slice from every agent's buffer) that all agents train on,
``share_buffer`` gives every agent its own draw with the same composition.
``independent`` trains each agent on its own buffer only.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .diversity import TargetPolicySet, diversity_reward, pairwise_diversity, polyak_update
from .envs import Env
from .fusion import fuse
from .numerics import (LOG_2PI, MLP, ConfigurationError, NonFiniteError, OptimizerState, PolicyNet,
                       apply_gradient, clip_by_norm, gaussian_entropy)
from .onpolicy import INIT_STREAM, ROLLOUT_STREAM, _nanmean, stream
from .rollout import EnvRunner, split_counts

SAMPLE_STREAM, NOISE_STREAM = 3, 4
MODES = ("share_batch", "share_buffer", "independent")


@dataclass
class OffPolicyConfig:
    n_agents: int = 5
    mode: str = "share_batch"
    train_batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_steps: int = 500
    gamma: float = 0.99
    tau: float = 0.005
    policy_tau: float | None = None
    lr: float = 3e-4
    optimizer: str = "adam"
    hidden: int = 64
    init_output_scale: float = 0.01
    alpha: float = 0.2
    auto_alpha: bool = False
    target_entropy: float | None = None
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    max_grad_norm: float | None = None
    use_dr: bool = True
    use_du: bool = True
    exclude_self: bool = False
    diversity_per_dim: bool = False
    fusion_floor: bool = False
    identical_init: bool = False
    log_interval: int = 1000
    return_window: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_agents < 1 or self.train_batch_size < self.n_agents:
            raise ConfigurationError("need n_agents >= 1 and train_batch_size >= n_agents")
        if self.optimizer not in ("sga", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def reference_scale(cls, **overrides):
        base = dict(n_agents=5, train_batch_size=256, warmup_steps=10_000, lr=3e-4, tau=0.005, gamma=0.99,
                    hidden=256, buffer_capacity=1_000_000)
        base.update(overrides)
        return cls(**base)


@dataclass
class ReplayBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    owner: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity FIFO store; sampling is uniform with replacement."""

    def __init__(self, capacity, obs_dim, act_dim, owner=0):
        if capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.owner = owner
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.ptr = 0
        self.size = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self.ptr
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = done
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def oldest_first(self):
        """Indices in insertion order, oldest surviving entry first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def sample(self, count, rng):
        idx = rng.integers(0, self.size, size=count)
        return ReplayBatch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                           self.dones[idx], np.full(count, self.owner, dtype=np.int64))


def _concat(batches):
    return ReplayBatch(*(np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(ReplayBatch)))


def sample_share_batch(buffers, total, rng):
    """``total`` samples split evenly over all buffers; ``None`` if any buffer is short."""
    counts = split_counts(total, len(buffers))
    if any(len(b) < c for b, c in zip(buffers, counts)):
        return None
    return _concat([b.sample(c, rng) for b, c in zip(buffers, counts)])


def sample_share_buffer(buffers, agent_k, total, rng):
    """Personal batch for ``agent_k`` with the same per-owner composition as a shared batch.

    ``rng`` should be the agent's own sampling stream so agents draw
    independently.
    """
    if not 0 <= agent_k < len(buffers):
        raise ConfigurationError(f"agent index {agent_k} out of range")
    return sample_share_batch(buffers, total, rng)


# -- squashed Gaussian policy ---------------------------------------------

def _log1m_tanh2(u):
    """log(1 - tanh(u)^2), computed without cancellation."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_sample(head, eps, bound):
    """Reparameterized action ``bound * tanh(mean + std * eps)`` and its log density."""
    std = np.exp(head.log_std)
    u = head.mean + std * eps
    t = np.tanh(u)
    logp = np.sum(-0.5 * eps * eps - head.log_std - 0.5 * LOG_2PI - np.log(bound) - _log1m_tanh2(u), axis=-1)
    return bound * t, logp, u, t


class QNet:
    """State-action critic: MLP over ``[obs, action]``."""

    def __init__(self, obs_dim, act_dim, hidden=64, rng=None):
        self.obs_dim = obs_dim
        self.body = MLP((obs_dim + act_dim, hidden, hidden, 1), rng=rng)
        self.size = self.body.size

    def forward(self, obs, act, params):
        out, cache = self.body.forward(np.concatenate([obs, act], axis=-1), params)
        return out[:, 0], cache

    def backward(self, cache, grad_q):
        """Returns parameter gradient and gradient w.r.t. the action input."""
        g, g_in = self.body.backward(cache, np.asarray(grad_q)[:, None])
        return g, g_in[:, self.obs_dim:]


def critic_objective(qnet: QNet, params, obs, actions, targets):
    """``-0.5 * mean((Q - target)^2)`` and its gradient (ascent form)."""
    q, cache = qnet.forward(obs, actions, params)
    err = q - targets
    g, _ = qnet.backward(cache, -err / len(err))
    return -0.5 * float(np.mean(err * err)), g


def actor_objective(policy: PolicyNet, params, qnet: QNet, q_params_list, obs, eps, alpha, bound):
    """Reparameterized SAC actor objective ``mean(min_i Q_i(s, a) - alpha * log pi(a|s))``.

    With a single critic and ``alpha = 0`` this is the plain ``mean(Q(s, a))``
    used for the diversity critic. Returns ``(value, grad, logp)``.
    """
    head, cache = policy.forward(obs, params)
    a, logp, u, t = squashed_sample(head, eps, bound)
    qs, caches = zip(*(qnet.forward(obs, a, qp) for qp in q_params_list))
    qs = np.stack(qs)
    pick = np.argmin(qs, axis=0)
    q_min = qs[pick, np.arange(len(obs))]
    B = len(obs)
    dq_da = np.zeros_like(a)
    for i, c in enumerate(caches):
        mask = (pick == i).astype(np.float64)
        if mask.any():
            _, g_a = qnet.backward(c, mask / B)
            dq_da += g_a
    dj_du = dq_da * bound * (1.0 - t * t) - alpha * 2.0 * t / B
    std = np.exp(head.log_std)
    g_log_std = np.sum(dj_du * std * eps, axis=0) + alpha
    grad = policy.backward(cache, dj_du, g_log_std)
    value = float(np.mean(q_min - alpha * logp))
    return value, grad, logp


class SacAgent:
    def __init__(self, index, policy: PolicyNet, qnet: QNet, rng, cfg: OffPolicyConfig, policy_params=None):
        self.index = index
        self.policy_params = policy.params.copy() if policy_params is None else policy_params.copy()
        self.q_params = [qnet.body.init_params(rng), qnet.body.init_params(rng)]
        self.q_target = [p.copy() for p in self.q_params]
        self.qd_params = qnet.body.init_params(rng)
        self.qd_target = self.qd_params.copy()
        self.log_alpha = float(np.log(cfg.alpha))
        mk = lambda: OptimizerState(lr=cfg.lr, kind=cfg.optimizer)  # noqa: E731
        self.policy_opt = mk()
        self.q_opts = [mk(), mk()]
        self.qd_opt = mk()
        self.alpha_opt = mk()

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha))


def _check_finite(what, value, **ctx):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what}", what=what, **ctx)


class OffPolicyTeam:
    def __init__(self, make_env, cfg: OffPolicyConfig, seed=0):
        self.cfg = cfg
        self.seed = seed
        envs: list[Env] = [make_env() for _ in range(cfg.n_agents)]
        spec = envs[0].spec
        if spec.action_kind != "continuous":
            raise ConfigurationError("the off-policy trainer needs a continuous action space")
        if not np.allclose(np.negative(spec.low), spec.high):
            raise ConfigurationError("the off-policy trainer needs symmetric action bounds")
        self.spec = spec
        self.bound = np.asarray(spec.high, dtype=np.float64)
        self.target_entropy = -float(spec.action_dim) if cfg.target_entropy is None else cfg.target_entropy
        self.agents = []
        for k in range(cfg.n_agents):
            rng = stream(seed, INIT_STREAM, 0 if cfg.identical_init else k)
            pol = PolicyNet(spec.obs_dim, spec.action_dim, cfg.hidden, "gaussian", rng=rng,
                            out_scale=cfg.init_output_scale, log_std_bounds=(cfg.log_std_min, cfg.log_std_max))
            q = QNet(spec.obs_dim, spec.action_dim, cfg.hidden, rng=rng)
            if k == 0:
                self.policy, self.qnet = pol, q
            self.agents.append(SacAgent(k, pol, q, rng, cfg))
        self.runners = [EnvRunner(e, seed=seed, return_window=cfg.return_window) for e in envs]
        self.buffers = [ReplayBuffer(cfg.buffer_capacity, spec.obs_dim, spec.action_dim, owner=k)
                        for k in range(cfg.n_agents)]
        self.rollout_rngs = [stream(seed, ROLLOUT_STREAM, k) for k in range(cfg.n_agents)]
        self.sample_rngs = [stream(seed, SAMPLE_STREAM, k) for k in range(cfg.n_agents)]
        self.team_sample_rng = stream(seed, SAMPLE_STREAM, cfg.n_agents)
        self.noise_rngs = [stream(seed, NOISE_STREAM, k) for k in range(cfg.n_agents)]
        self.targets = TargetPolicySet([a.policy_params for a in self.agents], cfg.tau if cfg.policy_tau is None
                                       else cfg.policy_tau)
        self.steps = 0
        self.env_steps = 0
        self.updates = 0
        self._stats = _Stats()

    # -- acting ------------------------------------------------------------
    def act(self, k, obs):
        agent = self.agents[k]
        head, _ = self.policy.forward(obs, agent.policy_params)
        eps = self.rollout_rngs[k].standard_normal(self.spec.action_dim)
        a, _, _, _ = squashed_sample(head, eps, self.bound)
        return a

    def env_step(self):
        for k, runner in enumerate(self.runners):
            obs = runner.obs
            a = self.act(k, obs)
            res = runner.step(a)
            self.buffers[k].add(obs, a, res.reward, res.next_obs, res.done)
        self.steps += 1
        self.env_steps += self.cfg.n_agents

    # -- learning ----------------------------------------------------------
    def batch_for(self, k, shared):
        cfg = self.cfg
        if cfg.mode == "share_batch":
            return shared
        if cfg.mode == "share_buffer":
            return sample_share_buffer(self.buffers, k, cfg.train_batch_size, self.sample_rngs[k])
        buf = self.buffers[k]
        if len(buf) < cfg.train_batch_size:
            return None
        return buf.sample(cfg.train_batch_size, self.sample_rngs[k])

    def critic_update(self, k, batch):
        """Twin-Q regression toward the soft Bellman target, then Polyak on target critics."""
        cfg = self.cfg
        agent = self.agents[k]
        rng = self.noise_rngs[k]
        y = self.critic_targets(k, batch, rng.standard_normal((len(batch), self.spec.action_dim)))
        losses = []
        for i in range(2):
            val, g = critic_objective(self.qnet, agent.q_params[i], batch.obs, batch.actions, y)
            agent.q_params[i] = apply_gradient(agent.q_params[i], g, agent.q_opts[i])
            losses.append(-val)
        agent.q_target = [polyak_update(t, p, cfg.tau) for t, p in zip(agent.q_target, agent.q_params)]
        return losses

    def critic_targets(self, k, batch, eps_next):
        agent = self.agents[k]
        head, _ = self.policy.forward(batch.next_obs, agent.policy_params)
        a_next, logp_next, _, _ = squashed_sample(head, eps_next, self.bound)
        q_next = np.minimum(*(self.qnet.forward(batch.next_obs, a_next, p)[0] for p in agent.q_target))
        not_done = 1.0 - batch.dones.astype(np.float64)
        return batch.rewards + self.cfg.gamma * not_done * (q_next - agent.alpha * logp_next)

    def diversity_rewards(self, k, obs):
        cfg = self.cfg
        return diversity_reward(k, obs, self.policy, self.agents[k].policy_params, self.targets,
                                exclude_self=cfg.exclude_self, per_dim_mean=cfg.diversity_per_dim)

    def diversity_critic_targets(self, k, batch, eps_next):
        agent = self.agents[k]
        r_d = self.diversity_rewards(k, batch.obs)
        head, _ = self.policy.forward(batch.next_obs, agent.policy_params)
        a_next, _, _, _ = squashed_sample(head, eps_next, self.bound)
        qd_next, _ = self.qnet.forward(batch.next_obs, a_next, agent.qd_target)
        not_done = 1.0 - batch.dones.astype(np.float64)
        return r_d + self.cfg.gamma * not_done * qd_next, r_d

    def diversity_critic_update(self, k, batch):
        agent = self.agents[k]
        y, r_d = self.diversity_critic_targets(k, batch, self.noise_rngs[k].standard_normal(
            (len(batch), self.spec.action_dim)))
        val, g = critic_objective(self.qnet, agent.qd_params, batch.obs, batch.actions, y)
        agent.qd_params = apply_gradient(agent.qd_params, g, agent.qd_opt)
        agent.qd_target = polyak_update(agent.qd_target, agent.qd_params, self.cfg.tau)
        return -val, r_d

    def actor_update(self, k, batch):
        """Fused actor step; returns the fusion result and the batch log-probs."""
        cfg = self.cfg
        agent = self.agents[k]
        eps = self.noise_rngs[k].standard_normal((len(batch), self.spec.action_dim))
        j_t, g_t, logp = actor_objective(self.policy, agent.policy_params, self.qnet, agent.q_params, batch.obs,
                                         eps, agent.alpha, self.bound)
        if cfg.use_dr:
            _, g_d, _ = actor_objective(self.policy, agent.policy_params, self.qnet, [agent.qd_params], batch.obs,
                                        eps, 0.0, self.bound)
        else:
            g_d = np.zeros_like(g_t)
        _check_finite("actor objective", j_t, agent=k, step=self.steps)
        _check_finite("actor gradient", g_t, agent=k, step=self.steps)
        _check_finite("diversity gradient", g_d, agent=k, step=self.steps)
        res = fuse(g_t, g_d, floor_at_zero=cfg.fusion_floor)
        agent.policy_params = apply_gradient(agent.policy_params, clip_by_norm(res.g_final, cfg.max_grad_norm),
                                             agent.policy_opt)
        if cfg.auto_alpha:
            grad_log_alpha = float(np.mean(logp + self.target_entropy))
            agent.log_alpha = float(apply_gradient(np.array([agent.log_alpha]), np.array([grad_log_alpha]),
                                                   agent.alpha_opt)[0])
        return res, logp

    def update(self):
        """One gradient step per agent; returns False while buffers are still warming up."""
        cfg = self.cfg
        if self.steps < cfg.warmup_steps:
            return False
        shared = None
        if cfg.mode == "share_batch":
            shared = sample_share_batch(self.buffers, cfg.train_batch_size, self.team_sample_rng)
            if shared is None:
                return False
        batches = [self.batch_for(k, shared) for k in range(cfg.n_agents)]
        if any(b is None for b in batches):
            return False
        for k, batch in enumerate(batches):
            q_losses = self.critic_update(k, batch)
            if cfg.use_dr:
                qd_loss, r_d = self.diversity_critic_update(k, batch)
                self._stats.add(qd_loss=qd_loss, diversity=float(np.mean(r_d)))
            res, _ = self.actor_update(k, batch)
            self._stats.add(q_loss=float(np.mean(q_losses)), cosine=res.cosine, clipped=float(res.clipped))
        live = [a.policy_params for a in self.agents]
        if cfg.use_du:
            self.targets.update(live)
        else:
            self.targets.sync(live)
        self.updates += 1
        return True

    def metrics(self):
        returns = [r.mean_return() for r in self.runners]
        finite = [r if np.isfinite(r) else -np.inf for r in returns]
        best = int(np.argmax(finite))
        obs = np.concatenate([b.obs[b.oldest_first()[-256:]] for b in self.buffers if len(b)])
        live = [a.policy_params for a in self.agents]
        ent = [gaussian_entropy(self.policy.forward(obs[:1], p)[0].log_std) for p in live]
        s = self._stats.flush()
        return dict(
            iteration=self.updates, env_steps=self.env_steps, agent_returns=returns, best_return=returns[best],
            best_agent=best, diversity_mean=s.get("diversity", float("nan")),
            pairwise_diversity=pairwise_diversity(obs, self.policy, live), entropy=float(np.mean(ent)),
            ratio_mean=float("nan"), ratio_max=float("nan"), grad_cosine=s.get("cosine", float("nan")),
            clip_frac=s.get("clipped", float("nan")) if self.cfg.use_dr else float("nan"),
            ratio_clip_frac=float("nan"), task_objective=float("nan"),
            extra=dict(q_loss=s.get("q_loss", float("nan")), qd_loss=s.get("qd_loss", float("nan")),
                       alpha=float(np.mean([a.alpha for a in self.agents]))),
        )


class _Stats:
    def __init__(self):
        self.values = {}

    def add(self, **kw):
        for k, v in kw.items():
            self.values.setdefault(k, []).append(v)

    def flush(self):
        out = {k: _nanmean(v) for k, v in self.values.items()}
        self.values = {}
        return out


def config_from_dict(d) -> OffPolicyConfig:
    names = {f.name for f in fields(OffPolicyConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown off-policy settings: {sorted(unknown)}")
    return OffPolicyConfig(**d)
