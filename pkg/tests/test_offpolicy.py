import math

import numpy as np
import pytest

from dice.envs import GridMaze, LineReturn, PointGoal2D
from dice.numerics import ConfigurationError, GaussianOut, OptimizerState, PolicyNet, apply_gradient, param_hash
from dice.offpolicy import (OffPolicyConfig, OffPolicyTeam, QNet, ReplayBuffer, actor_objective, critic_objective,
                            sample_share_batch, sample_share_buffer, squashed_sample)

from helpers import central_diff, rel_err


def _filled_buffers(k, n, obs_dim=2, act_dim=1):
    bufs = [ReplayBuffer(100, obs_dim, act_dim, owner=i) for i in range(k)]
    for i, b in enumerate(bufs):
        for t in range(n):
            b.add(np.full(obs_dim, t), np.zeros(act_dim), float(i), np.zeros(obs_dim), False)
    return bufs


def test_buffer_is_fifo():
    buf = ReplayBuffer(3, 1, 1)
    for t in range(5):
        buf.add([t], [0.0], float(t), [t + 1], False)
    assert len(buf) == 3 and buf.total_added == 5
    assert list(buf.rewards[buf.oldest_first()]) == [2.0, 3.0, 4.0]


def test_share_batch_composition():
    bufs = _filled_buffers(5, 60)
    rng = np.random.default_rng(0)
    batch = sample_share_batch(bufs, 256, rng)
    counts = np.bincount(batch.owner, minlength=5)
    assert sorted(counts.tolist()) == [51, 51, 51, 51, 52]
    assert np.array_equal(batch.rewards, batch.owner.astype(float))


def test_share_batch_waits_for_short_buffers():
    bufs = _filled_buffers(2, 3)
    assert sample_share_batch(bufs, 10, np.random.default_rng(0)) is None


def test_share_buffer_draws_per_agent():
    bufs = _filled_buffers(3, 50)
    a = sample_share_buffer(bufs, 0, 30, np.random.default_rng(1))
    b = sample_share_buffer(bufs, 1, 30, np.random.default_rng(2))
    assert np.array_equal(np.bincount(a.owner), [10, 10, 10])
    assert not np.array_equal(a.obs, b.obs)
    with pytest.raises(ConfigurationError):
        sample_share_buffer(bufs, 3, 30, np.random.default_rng(0))


def test_squashed_log_density_integrates_to_one():
    bound = 2.0
    head = GaussianOut(np.array([[0.4]]), np.array([-0.3]))
    eps = np.linspace(-9, 9, 400001)[:, None]
    a, logp, _, _ = squashed_sample(GaussianOut(np.repeat(head.mean, len(eps), 0), head.log_std), eps, bound)
    assert np.all(np.abs(a) <= bound)
    # change of variables back to eps: p(a) |da/deps| = N(eps)
    order = np.argsort(a[:, 0])
    assert np.trapezoid(np.exp(logp[order]), a[order, 0]) == pytest.approx(1.0, abs=1e-4)


def _small_setup(seed=0):
    rng = np.random.default_rng(seed)
    pol = PolicyNet(3, 2, hidden=5, rng=rng, out_scale=1.0, log_std_init=-0.5)
    q = QNet(3, 2, hidden=5, rng=rng)
    obs = rng.standard_normal((6, 3))
    return rng, pol, q, obs


def test_critic_gradient():
    rng, _, q, obs = _small_setup()
    assert q.size <= 200
    acts = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    params = q.body.params
    _, g = critic_objective(q, params, obs, acts, y)
    fd = central_diff(lambda p: critic_objective(q, p, obs, acts, y)[0], params.copy())
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("alpha, n_critics", [(0.2, 2), (0.0, 1)])
def test_actor_gradient(alpha, n_critics):
    rng, pol, q, obs = _small_setup(1)
    assert pol.size <= 200
    qps = [q.body.init_params(rng) for _ in range(n_critics)]
    eps = rng.standard_normal((6, 2))
    bound = np.array([1.0, 2.0])
    params = pol.params + 0.1 * rng.standard_normal(pol.size)
    _, g, _ = actor_objective(pol, params, q, qps, obs, eps, alpha, bound)
    fd = central_diff(lambda p: actor_objective(pol, p, q, qps, obs, eps, alpha, bound)[0], params.copy())
    assert rel_err(g, fd) < 1e-4


def _team(**kw):
    base = dict(n_agents=2, train_batch_size=16, warmup_steps=20, hidden=8, log_interval=10)
    base.update(kw)
    return OffPolicyTeam(lambda: PointGoal2D(), OffPolicyConfig(**base), seed=0)


def _warm(team, steps):
    for _ in range(steps):
        team.env_step()
        team.update()


def test_critic_targets_match_brute_force():
    team = _team()
    _warm(team, 25)
    batch = team.buffers[0].sample(4, np.random.default_rng(0))
    batch.dones[1] = True
    eps = np.random.default_rng(1).standard_normal((4, 2))
    y = team.critic_targets(0, batch, eps)
    agent = team.agents[0]
    for i in range(4):
        head, _ = team.policy.forward(batch.next_obs[i:i + 1], agent.policy_params)
        u = head.mean[0] + np.exp(head.log_std) * eps[i]
        a = team.bound * np.tanh(u)
        logp = sum(-0.5 * eps[i, d] ** 2 - head.log_std[d] - 0.5 * math.log(2 * math.pi)
                   - math.log(team.bound[d] * (1 - math.tanh(u[d]) ** 2)) for d in range(2))
        q = min(team.qnet.forward(batch.next_obs[i:i + 1], a[None], p)[0][0] for p in agent.q_target)
        expect = batch.rewards[i] + (0.0 if batch.dones[i] else 0.99 * (q - agent.alpha * logp))
        assert y[i] == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_zero_discount_target_is_reward():
    team = _team(gamma=0.0)
    _warm(team, 25)
    batch = team.buffers[1].sample(8, np.random.default_rng(0))
    eps = np.zeros((8, 2))
    assert np.array_equal(team.critic_targets(1, batch, eps), batch.rewards)
    y, r_d = team.diversity_critic_targets(1, batch, eps)
    assert np.array_equal(y, r_d)


def test_critic_loss_decreases_on_fixed_targets():
    rng, _, q, obs = _small_setup(2)
    acts = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    params, opt = q.body.params, OptimizerState(lr=1e-2, kind="adam")
    first, _ = critic_objective(q, params, obs, acts, y)
    for _ in range(200):
        _, g = critic_objective(q, params, obs, acts, y)
        params = apply_gradient(params, g, opt)
    assert critic_objective(q, params, obs, acts, y)[0] > first


def test_warmup_then_updates_and_metrics():
    team = _team()
    _warm(team, 19)
    assert team.updates == 0
    _warm(team, 11)
    assert team.updates == 11
    m = team.metrics()
    assert len(m["agent_returns"]) == 2 and np.isfinite(m["extra"]["q_loss"])


@pytest.mark.parametrize("mode", ["share_buffer", "independent"])
def test_modes_run(mode):
    team = _team(mode=mode)
    _warm(team, 30)
    assert team.updates > 0


def test_deterministic_given_seed():
    a, b = _team(), _team()
    _warm(a, 30)
    _warm(b, 30)
    assert [param_hash(x.policy_params) for x in a.agents] == [param_hash(x.policy_params) for x in b.agents]


def test_discrete_env_rejected():
    with pytest.raises(ConfigurationError):
        OffPolicyTeam(lambda: GridMaze(), OffPolicyConfig(n_agents=1), seed=0)
    with pytest.raises(ConfigurationError):
        OffPolicyConfig(mode="shared")


def test_line_return_learns_toward_an_optimum():
    cfg = OffPolicyConfig(n_agents=1, train_batch_size=32, warmup_steps=50, hidden=16, use_dr=False, gamma=0.0, alpha=0.01,
                          lr=3e-3)
    team = OffPolicyTeam(lambda: LineReturn(), cfg, seed=0)
    _warm(team, 1500)
    head, _ = team.policy.forward(np.ones(1), team.agents[0].policy_params)
    mean_action = 2.0 * np.tanh(head.mean[0])
    assert abs(abs(mean_action) - 1.0) < 0.3
