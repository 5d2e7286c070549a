"""Delayed-update targets, diversity rewards and diversity returns."""
from __future__ import annotations

import numpy as np

from .numerics import ConfigurationError, apply_gradient
from .rollout import discounted_returns


def polyak_update(target, latest, tau):
    """``(1 - tau) * target + tau * latest``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    target = np.asarray(target, dtype=np.float64)
    latest = np.asarray(latest, dtype=np.float64)
    if target.shape != latest.shape:
        raise ConfigurationError(f"shape mismatch {target.shape} vs {latest.shape}")
    return (1.0 - tau) * target + tau * latest


class TargetPolicySet:
    """Polyak-averaged copies of every team member's policy parameters."""

    def __init__(self, live_params, tau=0.005):
        self.params = [np.array(p, dtype=np.float64, copy=True) for p in live_params]
        self.tau = float(tau)

    def __len__(self):
        return len(self.params)

    def update(self, live_params, tau=None):
        tau = self.tau if tau is None else tau
        if len(live_params) != len(self.params):
            raise ConfigurationError("team size changed")
        self.params = [polyak_update(t, p, tau) for t, p in zip(self.params, live_params)]

    def sync(self, live_params):
        self.params = [np.array(p, dtype=np.float64, copy=True) for p in live_params]


def squared_distance(a, b, per_dim_mean=False):
    d = np.sum((a - b) ** 2, axis=-1)
    return d / a.shape[-1] if per_dim_mean else d


def diversity_reward(k, obs, policy, live_params, targets, exclude_self=False, per_dim_mean=False):
    """Diversity reward of agent ``k`` at each row of ``obs``.

    Mean squared distance between agent ``k``'s live action means and the
    action means of the target policies. By default every target, agent
    ``k``'s own included, takes part; ``exclude_self`` drops the own target
    and divides by ``K - 1`` instead (zero for a single agent).
    """
    obs = np.atleast_2d(obs)
    mine = policy.action_means(obs, live_params)
    others = [j for j in range(len(targets)) if not (exclude_self and j == k)]
    if not others:
        return np.zeros(len(obs))
    total = np.zeros(len(obs))
    for j in others:
        total += squared_distance(mine, policy.action_means(obs, targets.params[j]), per_dim_mean)
    return total / len(others)


def pairwise_diversity(obs, policy, params_list):
    """Mean squared distance between action means over all unordered pairs."""
    means = [policy.action_means(obs, p) for p in params_list]
    k = len(means)
    if k < 2:
        return 0.0
    vals = [np.mean(squared_distance(means[i], means[j])) for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(vals))


def diversity_return(rewards, gamma, segment_ends):
    """Discounted diversity return within each segment (no bootstrap)."""
    return discounted_returns(np.asarray(rewards, dtype=np.float64), gamma, segment_ends)


def fit_dvn(dvn, params, opt, obs, targets, minibatch_size=None, rng=None, epochs=1):
    """Regress a diversity value network toward ``targets``; returns new params and mean loss."""
    n = len(obs)
    mb = n if minibatch_size is None else min(minibatch_size, n)
    losses = []
    for _ in range(epochs):
        order = np.arange(n) if rng is None else rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            params, loss = value_regression_step(dvn, params, opt, obs[idx], targets[idx])
            losses.append(loss)
    return params, float(np.mean(losses))


def value_regression_step(net, params, opt, obs, targets):
    """One ascent step on ``-0.5 * mean((v - target)^2)``."""
    v, cache = net.forward(obs, params)
    err = v - targets
    grad = net.backward(cache, -err / len(err))
    return apply_gradient(params, grad, opt), float(0.5 * np.mean(err * err))
