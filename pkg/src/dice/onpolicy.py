"""On-policy team trainer built on a PPO-style clipped surrogate.

Each iteration every agent rolls out its own environment copy, advantages
are computed with the collecting agent's value network and frozen, the
batches are merged into one shared batch, and every agent is updated with
the fused task/diversity gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .diversity import (TargetPolicySet, diversity_return, diversity_reward, pairwise_diversity,
                        value_regression_step)
from .envs import Env
from .fusion import fuse
from .numerics import (ConfigurationError, GaussianOut, NonFiniteError, OptimizerState, PolicyNet,
                       ValueNet, apply_gradient, categorical_entropy, categorical_kl,
                       categorical_kl_grad, categorical_log_prob, categorical_log_prob_grad,
                       clip_by_norm, gaussian_entropy, gaussian_kl, gaussian_kl_grads,
                       gaussian_log_prob, gaussian_log_prob_grads, softmax)
from .rollout import (EnvRunner, TrajectoryBatch, collect, compute_advantages, discounted_returns, gae,
                      merge_team_batches, normalize_advantages, split_counts)

# seed-sequence stream ids; agent k draws from SeedSequence(seed, spawn_key=(stream, k))
INIT_STREAM, ROLLOUT_STREAM, SHUFFLE_STREAM = 0, 1, 2


@dataclass
class OnPolicyConfig:
    n_agents: int = 5
    train_batch_size: int = 640
    minibatch_size: int = 128
    sgd_iters: int = 4
    clip_eps: float = 0.2
    kl_coeff: float = 0.2
    entropy_coeff: float = 0.0
    gamma: float = 0.99
    lam: float = 1.0
    tau: float = 0.005
    lr: float = 1e-4
    value_lr: float | None = None
    optimizer: str = "sga"
    max_grad_norm: float | None = 10.0
    hidden: int = 64
    log_std_init: float = 0.0
    init_output_scale: float = 0.01
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    return_window: int = 10
    use_ce: bool = True
    use_dr: bool = True
    use_tsc: bool = True
    use_dvn: bool = False
    use_na: bool = False
    use_du: bool = True
    exclude_self: bool = False
    diversity_per_dim: bool = False
    fusion_floor: bool = False
    identical_init: bool = False

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        if self.train_batch_size < self.n_agents:
            raise ConfigurationError("train_batch_size must be >= n_agents")
        if not 1 <= self.minibatch_size <= self.train_batch_size:
            raise ConfigurationError("minibatch_size must lie in [1, train_batch_size]")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0 and 0.0 <= self.tau <= 1.0):
            raise ConfigurationError("gamma, lam and tau must lie in [0, 1]")
        if self.optimizer not in ("sga", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def reference_scale(cls, **overrides):
        base = dict(n_agents=5, train_batch_size=2048, minibatch_size=64, sgd_iters=10, kl_coeff=1.0,
                    lam=1.0, gamma=0.99, lr=1e-4, tau=0.005, max_grad_norm=10.0, hidden=256)
        base.update(overrides)
        return cls(**base)


@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    agent_returns: list
    best_return: float
    best_agent: int
    diversity_mean: float
    pairwise_diversity: float
    entropy: float
    ratio_mean: float
    ratio_max: float
    grad_cosine: float
    clip_frac: float
    ratio_clip_frac: float
    task_objective: float
    status: str = "ok"
    extra: dict = field(default_factory=dict)


def tsc_loss(ratio, adv, eps):
    """Two-side clipped surrogate ``clip(ratio, 0, 1 + eps) * adv``."""
    return np.clip(ratio, 0.0, 1.0 + eps) * adv


def ppo_clip_loss(ratio, adv, eps):
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def _surrogate_and_slope(ratio, adv, eps, two_side):
    """Per-sample surrogate value and its derivative w.r.t. the ratio."""
    if two_side:
        value = tsc_loss(ratio, adv, eps)
        slope = np.where(ratio <= 1.0 + eps, adv, 0.0)
        return value, slope
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    value = np.minimum(unclipped, clipped)
    slope = np.where(unclipped <= clipped, adv, 0.0)
    return value, slope


def owner_weights(owner):
    """Weights that average per-owner means with equal weight per owner present."""
    owner = np.asarray(owner)
    uniq, inverse, counts = np.unique(owner, return_inverse=True, return_counts=True)
    return 1.0 / (len(uniq) * counts[inverse])


@dataclass
class SurrogateResult:
    value: float
    grad: np.ndarray
    ratio: np.ndarray
    ratio_clipped: np.ndarray
    entropy: float


def surrogate_objective(policy: PolicyNet, params, batch: TrajectoryBatch, signal, *, clip_eps, two_side,
                        kl_coeff=0.0, entropy_coeff=0.0, weights=None, forward=None):
    """Owner-weighted clipped surrogate plus optional KL penalty and entropy bonus.

    ``signal`` plays the advantage role (task advantages or diversity
    returns). The KL penalty is ``KL(behavior || current)``. Returns the
    scalar objective and its exact gradient w.r.t. ``params``.
    """
    head, cache = policy.forward(batch.obs, params) if forward is None else forward
    w = owner_weights(batch.owner) if weights is None else weights
    signal = np.asarray(signal, dtype=np.float64)
    if isinstance(head, GaussianOut):
        a_dim = policy.act_dim
        logp = gaussian_log_prob(head.mean, head.log_std, batch.actions)
        d_mean, d_log_std = gaussian_log_prob_grads(head.mean, head.log_std, batch.actions)
    else:
        logp = categorical_log_prob(head.logits, batch.actions)
        d_logits = categorical_log_prob_grad(head.logits, batch.actions)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - batch.logp)
    surr, slope = _surrogate_and_slope(ratio, signal, clip_eps, two_side)
    value = float(np.sum(w * surr))
    active = slope != 0.0
    up = np.zeros_like(ratio)
    up[active] = w[active] * slope[active] * ratio[active]

    if isinstance(head, GaussianOut):
        g_mean = up[:, None] * d_mean
        g_log_std = np.sum(up[:, None] * d_log_std, axis=0)
        entropy = gaussian_entropy(head.log_std)
        if kl_coeff:
            b_mean, b_log_std = batch.behavior[:, :a_dim], batch.behavior[:, a_dim:]
            kl = gaussian_kl(b_mean, b_log_std, head.mean, head.log_std)
            value -= kl_coeff * float(np.sum(w * kl))
            k_mean, k_log_std = gaussian_kl_grads(b_mean, b_log_std, head.mean, head.log_std)
            g_mean = g_mean - kl_coeff * w[:, None] * k_mean
            g_log_std = g_log_std - kl_coeff * np.sum(w[:, None] * k_log_std, axis=0)
        if entropy_coeff:
            value += entropy_coeff * entropy
            g_log_std = g_log_std + entropy_coeff
        grad = policy.backward(cache, g_mean, g_log_std)
    else:
        g_logits = up[:, None] * d_logits
        ent_rows = categorical_entropy(head.logits)
        entropy = float(np.mean(ent_rows))
        if kl_coeff:
            kl = categorical_kl(batch.behavior, head.logits)
            value -= kl_coeff * float(np.sum(w * kl))
            g_logits = g_logits - kl_coeff * w[:, None] * categorical_kl_grad(batch.behavior, head.logits)
        if entropy_coeff:
            value += entropy_coeff * entropy
            p = softmax(head.logits)
            logp_all = np.log(np.maximum(p, 1e-300))
            g_logits = g_logits - entropy_coeff * p * (logp_all + ent_rows[:, None]) / len(p)
        grad = policy.backward(cache, g_logits)
    return SurrogateResult(value, grad, ratio, ~active, entropy)


def ce_task_objective(policy, params, batch, advantages, cfg: OnPolicyConfig, forward=None):
    return surrogate_objective(policy, params, batch, advantages, clip_eps=cfg.clip_eps, two_side=cfg.use_tsc,
                               kl_coeff=cfg.kl_coeff, entropy_coeff=cfg.entropy_coeff, forward=forward)


def diversity_objective(policy, params, batch, diversity_signal, cfg: OnPolicyConfig, forward=None):
    return surrogate_objective(policy, params, batch, diversity_signal, clip_eps=cfg.clip_eps,
                               two_side=cfg.use_tsc, forward=forward)


class Agent:
    def __init__(self, index, policy_params, value_params, dvn_params, cfg: OnPolicyConfig):
        self.index = index
        self.policy_params = policy_params
        self.value_params = value_params
        self.dvn_params = dvn_params
        value_lr = cfg.lr if cfg.value_lr is None else cfg.value_lr
        self.policy_opt = OptimizerState(lr=cfg.lr, kind=cfg.optimizer)
        self.value_opt = OptimizerState(lr=value_lr, kind=cfg.optimizer)
        self.dvn_opt = OptimizerState(lr=value_lr, kind=cfg.optimizer)


def stream(seed, stream_id, k=0):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream_id, k)))


class Team:
    """K agents, their environment copies, delayed targets and random streams."""

    def __init__(self, make_env, cfg: OnPolicyConfig, seed=0):
        self.cfg = cfg
        self.seed = seed
        envs: list[Env] = [make_env() for _ in range(cfg.n_agents)]
        spec = envs[0].spec
        if any(e.spec != spec for e in envs):
            raise ConfigurationError("team members must share one environment spec")
        self.spec = spec
        kind = "categorical" if spec.action_kind == "discrete" else "gaussian"
        self.agents = []
        for k in range(cfg.n_agents):
            rng = stream(seed, INIT_STREAM, 0 if cfg.identical_init else k)
            pol = PolicyNet(spec.obs_dim, spec.action_dim, cfg.hidden, kind, rng=rng, log_std_init=cfg.log_std_init,
                            log_std_bounds=(cfg.log_std_min, cfg.log_std_max), out_scale=cfg.init_output_scale)
            val = ValueNet(spec.obs_dim, cfg.hidden, rng=rng)
            dvn = ValueNet(spec.obs_dim, cfg.hidden, rng=rng) if cfg.use_dvn else None
            if k == 0:
                self.policy, self.value_net, self.dvn = pol, val, dvn
            self.agents.append(Agent(k, pol.params.copy(), val.params.copy(),
                                     None if dvn is None else dvn.params.copy(), cfg))
        self.runners = [EnvRunner(e, seed=seed, return_window=cfg.return_window) for e in envs]
        self.rollout_rngs = [stream(seed, ROLLOUT_STREAM, k) for k in range(cfg.n_agents)]
        self.shuffle_rng = stream(seed, SHUFFLE_STREAM)
        self.targets = TargetPolicySet([a.policy_params for a in self.agents], cfg.tau)
        self.iteration = 0
        self.env_steps = 0

    @property
    def policy_params(self):
        return [a.policy_params for a in self.agents]


def _check_finite(what, value, **context):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what}", what=what, **context)


def _nanmean(values):
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else float("nan")


def diversity_signals(team: Team, train_batches, live):
    """Diversity rewards and the signal each agent's diversity objective uses."""
    cfg = team.cfg
    rewards, signals, dvn_targets = [], [], []
    for k, tb in enumerate(train_batches):
        r_d = diversity_reward(k, tb.obs, team.policy, live[k], team.targets,
                               exclude_self=cfg.exclude_self, per_dim_mean=cfg.diversity_per_dim)
        ends = tb.segment_ends()
        if cfg.use_dvn:
            params = team.agents[k].dvn_params
            v, _ = team.dvn.forward(tb.obs, params)
            v_next, _ = team.dvn.forward(tb.next_obs, params)
            signal = gae(r_d, v, v_next, tb.dones, cfg.gamma, cfg.lam, ends)
            target = discounted_returns(r_d, cfg.gamma, ends, np.where(tb.dones, 0.0, v_next))
        else:
            signal = diversity_return(r_d, cfg.gamma, ends)
            target = None
        rewards.append(r_d)
        signals.append(signal)
        dvn_targets.append(target)
    return rewards, signals, dvn_targets


def train_iteration(team: Team) -> IterationMetrics:
    """One collect / merge / update cycle for the whole team.

    Raises :class:`NonFiniteError` if any ratio, objective, gradient or
    parameter stops being finite.
    """
    cfg = team.cfg
    K = cfg.n_agents
    counts = split_counts(cfg.train_batch_size, K)
    batches = []
    for k, agent in enumerate(team.agents):
        b = collect(team.policy, agent.policy_params, team.runners[k], counts[k], team.rollout_rngs[k], owner=k)
        compute_advantages(b, team.value_net, agent.value_params, cfg.gamma, cfg.lam)
        batches.append(b)
    team.env_steps += sum(counts)
    it = team.iteration

    if cfg.use_ce:
        shared = merge_team_batches(batches)
        train_batches = [shared] * K
    else:
        train_batches = batches

    live = [p.copy() for p in team.policy_params]
    if cfg.use_dr:
        div_rewards, div_signals, dvn_targets = diversity_signals(team, train_batches, live)
    else:
        div_rewards = div_signals = dvn_targets = [None] * K

    task_adv = []
    for k, tb in enumerate(train_batches):
        adv = tb.advantages
        if cfg.use_na:
            adv = normalize_advantages(adv)
            if div_signals[k] is not None:
                div_signals[k] = normalize_advantages(div_signals[k])
        task_adv.append(adv)

    # one permutation per epoch shared by every agent when the batch is shared
    perms = []
    for _ in range(cfg.sgd_iters):
        if cfg.use_ce:
            p = team.shuffle_rng.permutation(len(train_batches[0]))
            perms.append([p] * K)
        else:
            perms.append([team.shuffle_rng.permutation(len(tb)) for tb in train_batches])

    ratios, ratio_clipped, cosines, fusion_clipped, objectives = [], [], [], [], []
    mb = cfg.minibatch_size
    for k, agent in enumerate(team.agents):
        tb = train_batches[k]
        for epoch in range(cfg.sgd_iters):
            order = perms[epoch][k]
            for start in range(0, len(tb), mb):
                idx = order[start:start + mb]
                sub = tb.subset(idx)
                fwd = team.policy.forward(sub.obs, agent.policy_params)
                task = ce_task_objective(team.policy, agent.policy_params, sub, task_adv[k][idx], cfg, forward=fwd)
                ctx = dict(iteration=it, agent=k, epoch=epoch)
                _check_finite("probability ratio", task.ratio, **ctx)
                _check_finite("task objective", task.value, **ctx)
                _check_finite("task gradient", task.grad, **ctx)
                if cfg.use_dr:
                    div = diversity_objective(team.policy, agent.policy_params, sub, div_signals[k][idx], cfg,
                                              forward=fwd)
                    _check_finite("diversity objective", div.value, **ctx)
                    _check_finite("diversity gradient", div.grad, **ctx)
                    g_d = div.grad
                else:
                    g_d = np.zeros_like(task.grad)
                res = fuse(task.grad, g_d, floor_at_zero=cfg.fusion_floor)
                g = clip_by_norm(res.g_final, cfg.max_grad_norm)
                agent.policy_params = apply_gradient(agent.policy_params, g, agent.policy_opt)
                _check_finite("policy parameters", agent.policy_params, **ctx)

                own = sub.owner == k
                if own.any():
                    agent.value_params, _ = value_regression_step(team.value_net, agent.value_params,
                                                                  agent.value_opt, sub.obs[own], sub.returns[own])
                    _check_finite("value parameters", agent.value_params, **ctx)
                if cfg.use_dvn:
                    agent.dvn_params, _ = value_regression_step(team.dvn, agent.dvn_params, agent.dvn_opt,
                                                                sub.obs, dvn_targets[k][idx])
                    _check_finite("diversity value parameters", agent.dvn_params, **ctx)

                ratios.append(task.ratio)
                ratio_clipped.append(task.ratio_clipped)
                objectives.append(task.value)
                if cfg.use_dr:
                    cosines.append(res.cosine)
                    fusion_clipped.append(res.clipped)

    new_live = team.policy_params
    if cfg.use_du:
        team.targets.update(new_live)
    else:
        team.targets.sync(new_live)
    team.iteration += 1

    all_obs = np.concatenate([b.obs for b in batches])
    returns = [r.mean_return() for r in team.runners]
    finite = [r if np.isfinite(r) else -np.inf for r in returns]
    best_agent = int(np.argmax(finite))
    ratio_all = np.concatenate(ratios)
    return IterationMetrics(
        iteration=team.iteration,
        env_steps=team.env_steps,
        agent_returns=returns,
        best_return=returns[best_agent],
        best_agent=best_agent,
        diversity_mean=_nanmean([np.mean(r) for r in div_rewards]) if cfg.use_dr else float("nan"),
        pairwise_diversity=pairwise_diversity(all_obs, team.policy, new_live),
        entropy=float(np.mean([policy_entropy(team.policy, p, all_obs) for p in new_live])),
        ratio_mean=float(np.mean(ratio_all)),
        ratio_max=float(np.max(ratio_all)),
        grad_cosine=_nanmean(cosines),
        clip_frac=float(np.mean(fusion_clipped)) if fusion_clipped else float("nan"),
        ratio_clip_frac=float(np.mean(np.concatenate(ratio_clipped))),
        task_objective=float(np.mean(objectives)),
    )


def policy_entropy(policy: PolicyNet, params, obs):
    head, _ = policy.forward(obs, params)
    if isinstance(head, GaussianOut):
        return gaussian_entropy(head.log_std)
    return float(np.mean(categorical_entropy(head.logits)))


def config_from_dict(d) -> OnPolicyConfig:
    names = {f.name for f in fields(OnPolicyConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown on-policy settings: {sorted(unknown)}")
    return OnPolicyConfig(**d)
