"""Acceptance gate: one test per criterion, each printed as a pass/fail line in the terminal summary.

The experiment-backed criteria (5, 6, 7, 11) train real teams on PointGoal2D
and take several minutes each; everything else runs in seconds.
"""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dice.diversity import TargetPolicySet, diversity_return, diversity_reward
from dice.envs import make_env
from dice.fusion import fuse
from dice.harness.config import load_config
from dice.harness.runner import run
from dice.numerics import PolicyNet, ValueNet, param_hash
from dice.offpolicy import (OffPolicyConfig, OffPolicyTeam, QNet, ReplayBuffer, actor_objective, critic_objective,
                            sample_share_batch, sample_share_buffer)
from dice.onpolicy import (OnPolicyConfig, Team, diversity_objective, ppo_clip_loss, surrogate_objective,
                           train_iteration, tsc_loss)
from dice.rollout import EnvRunner, collect, compute_advantages, merge_team_batches
from helpers import central_diff, rel_err
from reference import PPO_SETTINGS, SAC_SETTINGS, format_rows

HERE = Path(__file__).parent
CONFIGS = HERE.parent / "configs"


# -- 1 ---------------------------------------------------------------------

@pytest.mark.criterion(1, "fused direction is feasible for both objectives")
def test_fusion_feasibility(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checked = violations = 0
    for dim in (2, 10, 1000):
        for _ in range(10_000):
            g_t, g_d = rng.standard_normal((2, dim)) * rng.lognormal(0, 2, size=(2, 1))
            res = fuse(g_t, g_d)
            if res.cosine <= -0.999:
                continue
            magnitude = 0.5 * (res.proj_task + min(res.proj_div, res.proj_task))
            if magnitude > 0:
                checked += 1
                violations += not (res.g_final @ g_t > 0 and res.g_final @ g_d > 0)
    # function level: a short step along the fused direction improves both quadratics
    improved = trials = 0
    for dim in (2, 10, 50):
        for _ in range(1000):
            a_f, a_h = (m @ m.T / dim + 0.1 * np.eye(dim) for m in rng.standard_normal((2, dim, dim)))
            c_f, c_h, x = rng.standard_normal((3, dim))
            f = lambda y: -0.5 * (y - c_f) @ a_f @ (y - c_f)  # noqa: E731
            h = lambda y: -0.5 * (y - c_h) @ a_h @ (y - c_h)  # noqa: E731
            g_t, g_d = -a_f @ (x - c_f), -a_h @ (x - c_h)
            res = fuse(g_t, g_d)
            if res.cosine <= -0.999:
                continue
            trials += 1
            y = x + 1e-4 * res.g_final / np.linalg.norm(res.g_final)
            improved += f(y) > f(x) and h(y) > h(x)
    elapsed = time.perf_counter() - start
    rate = improved / trials
    record_property("detail", f"{violations}/{checked} violations, both improve in {rate:.2%}, {elapsed:.1f}s")
    assert violations == 0
    assert rate >= 0.99
    assert elapsed < 10


# -- 2 ---------------------------------------------------------------------

def _brute_force_fuse(g_t, g_d):
    """Component-wise re-derivation in plain Python floats."""
    nt = math.sqrt(sum(v * v for v in g_t))
    nd = math.sqrt(sum(v * v for v in g_d))
    s = [a / nt + b / nd for a, b in zip(g_t, g_d)]
    ns = math.sqrt(sum(v * v for v in s))
    d = [v / ns for v in s]
    pt = sum(a * b for a, b in zip(g_t, d))
    pd = sum(a * b for a, b in zip(g_d, d))
    return pd > pt, [(pt + min(pd, pt)) / 2 * v for v in d]


@pytest.mark.criterion(2, "fusion matches hand values and an independent re-derivation")
def test_fusion_exactness(record_property):
    res = fuse(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert np.max(np.abs(res.g_final - [0.5, 0.5])) <= 1e-12
    rng = np.random.default_rng(1)
    for _ in range(100):
        g = rng.standard_normal(7) * 10
        assert np.max(np.abs(fuse(g, g).g_final - g)) <= 1e-12
    mismatches = n_clipped = 0
    for _ in range(1000):
        dim = int(rng.integers(2, 20))
        g_t, g_d = rng.standard_normal(dim), rng.standard_normal(dim) * rng.lognormal(0, 1.5)
        res = fuse(g_t, g_d)
        clipped, g_bf = _brute_force_fuse(g_t.tolist(), g_d.tolist())
        n_clipped += clipped
        mismatches += res.clipped != clipped or not np.allclose(res.g_final, g_bf, rtol=1e-10, atol=1e-12)
    record_property("detail", f"{mismatches} mismatches over 1000 pairs, clip active in {n_clipped}")
    assert mismatches == 0
    assert 0 < n_clipped < 1000


# -- 3 ---------------------------------------------------------------------

def _fd_check(f, x):
    return rel_err(f(x)[1], central_diff(lambda p: f(p)[0], x.copy()))


@pytest.mark.criterion(3, "every objective gradient matches central finite differences")
def test_gradient_correctness(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    env = make_env("point_goal_2d", n_goals=2)
    spec = env.spec
    errs = {}
    # on-policy task and diversity surrogates on a real team batch
    pol = PolicyNet(spec.obs_dim, spec.action_dim, hidden=6, rng=rng, out_scale=1.0)
    val_pol = PolicyNet(spec.obs_dim, spec.action_dim, hidden=6, rng=rng, out_scale=1.0)
    assert pol.size <= 200
    vnet = ValueNet(spec.obs_dim, hidden=6, rng=rng)
    batches = []
    for k in range(2):
        b = collect(pol, pol.params + 0.1 * k, EnvRunner(make_env("point_goal_2d", n_goals=2)), 12, rng, owner=k)
        compute_advantages(b, vnet, vnet.params, 0.99, 0.95)
        batches.append(b)
    shared = merge_team_batches(batches)
    params = pol.params + 0.05 * rng.standard_normal(pol.size)
    for two_side in (True, False):
        errs[f"task tsc={two_side}"] = _fd_check(lambda p: (lambda r: (r.value, r.grad))(surrogate_objective(
            pol, p, shared, shared.advantages, clip_eps=0.2, two_side=two_side, kl_coeff=0.2, entropy_coeff=0.01)),
            params)
    targets = TargetPolicySet([pol.params, val_pol.params])
    r_d = diversity_reward(0, shared.obs, pol, params, targets)
    signal = diversity_return(r_d, 0.99, shared.segment_ends())
    cfg = OnPolicyConfig(n_agents=2)
    errs["diversity"] = _fd_check(lambda p: (lambda r: (r.value, r.grad))(diversity_objective(
        pol, p, shared, signal, cfg)), params)
    # off-policy: twin critic, diversity critic, actor and diversity actor
    q = QNet(spec.obs_dim, spec.action_dim, hidden=6, rng=rng)
    assert q.size <= 200
    obs, acts = shared.obs[:8], np.tanh(shared.actions[:8])
    y = rng.standard_normal(8)
    errs["critic"] = _fd_check(lambda p: critic_objective(q, p, obs, acts, y), q.body.params)
    y_d = diversity_reward(0, obs, pol, params, targets) + 0.99 * rng.standard_normal(8)
    errs["diversity critic"] = _fd_check(lambda p: critic_objective(q, p, obs, acts, y_d), q.body.params)
    qps = [q.body.init_params(rng) for _ in range(2)]
    eps = rng.standard_normal((8, spec.action_dim))
    bound = np.ones(spec.action_dim)
    errs["actor"] = _fd_check(lambda p: actor_objective(pol, p, q, qps, obs, eps, 0.2, bound)[:2], params)
    errs["diversity actor"] = _fd_check(lambda p: actor_objective(pol, p, q, qps[:1], obs, eps, 0.0, bound)[:2],
                                        params)
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    record_property("detail", f"worst rel err {errs[worst]:.1e} ({worst}), {elapsed:.1f}s")
    assert all(e < 1e-4 for e in errs.values()), errs
    assert elapsed < 60


# -- 4 ---------------------------------------------------------------------

@pytest.mark.criterion(4, "two-side clip bounds the loss from below, PPO clip does not")
def test_tsc_bound(record_property):
    rng = np.random.default_rng(3)
    rho = rng.exponential(2.0, 100_000)
    adv = rng.standard_normal(100_000) * 5
    eps = 0.2
    tsc = tsc_loss(rho, adv, eps)
    bound = (1 + eps) * np.minimum(adv, 0.0)
    ppo = ppo_clip_loss(rho, adv, eps)
    ppo_viol = (ppo < bound) & (rho > 1 + eps) & (adv < 0)
    record_property("detail", f"tsc below bound {int(np.sum(tsc < bound))}, ppo below bound {int(ppo_viol.sum())}")
    assert np.all(tsc >= bound)
    assert ppo_viol.any()


# -- shared runs for 6, 7 and 11 -------------------------------------------

_SCORES = {}


def _read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _final_score(rows, tail=10):
    vals = [float(r["best_return"]) for r in rows if r["status"] == "ok"][-tail:]
    return float(np.mean(vals))


def _scores(root, config, overrides, seeds):
    """Final best-agent score per seed; each (config, overrides, seed) trains once per session."""
    scores = []
    for seed in seeds:
        key = (config, tuple(overrides), seed)
        if key not in _SCORES:
            cfg = load_config(CONFIGS / config, list(overrides) + [f"seeds=[{seed}]"])
            out = root / f"run_{len(_SCORES)}"
            run(cfg, out)
            _SCORES[key] = _final_score(_read_metrics(next(out.rglob("metrics.csv"))))
        scores.append(_SCORES[key])
    return np.array(scores)


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


# -- 5 ---------------------------------------------------------------------

@pytest.mark.criterion(5, "without diversity regularization the team collapses")
def test_diversity_collapse(record_property):
    start = time.perf_counter()
    make = lambda: make_env("point_goal_2d", goal_bonus=[0.5, 0.5, 1.0])  # noqa: E731
    base = dict(n_agents=5, optimizer="adam", lr=3e-4, tau=0.05, init_output_scale=1.0, hidden=32,
                train_batch_size=320, minibatch_size=64)
    team = Team(make, OnPolicyConfig(use_dr=False, identical_init=True, **base), seed=0)
    identical = True
    for _ in range(50):
        train_iteration(team)
        hashes = {param_hash(p) for p in team.policy_params}
        identical &= len(hashes) == 1
    div = {}
    for use_dr in (False, True):
        vals = []
        for seed in (0, 1, 2):
            team = Team(make, OnPolicyConfig(use_dr=use_dr, **base), seed=seed)
            for _ in range(200):
                m = train_iteration(team)
            vals.append(m.pairwise_diversity)
        div[use_dr] = float(np.mean(vals))
    elapsed = time.perf_counter() - start
    record_property("detail", f"identical for 50 iters: {identical}, diversity at 200: DR off {div[False]:.4f} "
                              f"vs on {div[True]:.4f}, {elapsed:.0f}s")
    assert identical
    assert div[False] < div[True]
    assert elapsed < 300


# -- 6 ---------------------------------------------------------------------

@pytest.mark.criterion(6, "team with shared rollouts beats single-agent PPO at equal env steps")
def test_ce_benefit(run_root, record_property):
    start = time.perf_counter()
    seeds = [0, 1, 2, 3, 4]
    dice = _scores(run_root, "pointgoal_dice.yaml", [], seeds)
    ppo = _scores(run_root, "pointgoal_ppo.yaml", [], seeds)
    pooled = math.sqrt((dice.var(ddof=1) + ppo.var(ddof=1)) / 2)
    margin = dice.mean() - ppo.mean()
    elapsed = time.perf_counter() - start
    record_property("detail", f"DiCE {dice.mean():.3f} vs PPO {ppo.mean():.3f}, margin {margin:+.3f}, "
                              f"pooled std {pooled:.3f}, {elapsed:.0f}s")
    assert margin > pooled
    assert elapsed < 900


# -- 7 ---------------------------------------------------------------------

@pytest.mark.criterion(7, "best-agent return rises then falls with team size")
def test_team_size_sweep(run_root, record_property):
    seeds = [0, 1, 2]
    means = {k: float(_scores(run_root, "pointgoal_dice.yaml", [] if k == 5 else [f"onpolicy.n_agents={k}"],
                              seeds).mean()) for k in (1, 3, 5, 7, 10)}
    middle = max(means[k] for k in (3, 5, 7))
    record_property("detail", " ".join(f"K={k}:{v:.3f}" for k, v in means.items()))
    assert middle > means[1] and middle > means[10]


# -- 8 ---------------------------------------------------------------------

@pytest.mark.criterion(8, "team of one with team features off reproduces reference PPO and SAC")
def test_reductions(record_property):
    data = HERE / "data"
    P, S = PPO_SETTINGS, SAC_SETTINGS
    cfg = OnPolicyConfig(n_agents=1, use_ce=False, use_dr=False, use_tsc=False, use_du=False,
                         train_batch_size=P["batch"], minibatch_size=P["minibatch"], sgd_iters=P["epochs"],
                         clip_eps=P["clip_eps"], kl_coeff=P["kl_coeff"], gamma=P["gamma"], lam=P["lam"], lr=P["lr"],
                         hidden=P["hidden"], max_grad_norm=P["max_grad_norm"], optimizer=P["optimizer"])
    team = Team(lambda: make_env(P["env"], **P["env_params"]), cfg, seed=P["seed"])
    rows = []
    for _ in range(P["iterations"]):
        m = train_iteration(team)
        rows.append([m.iteration, m.env_steps, m.best_return, m.entropy, m.ratio_mean, m.ratio_max, m.task_objective,
                     param_hash(team.agents[0].policy_params)])
    ppo_ok = format_rows(rows) == (data / "golden_ppo.csv").read_text()

    cfg = OffPolicyConfig(n_agents=1, use_dr=False, train_batch_size=S["batch"], warmup_steps=S["warmup"],
                          gamma=S["gamma"], tau=S["tau"], lr=S["lr"], hidden=S["hidden"], alpha=S["alpha"],
                          log_interval=S["log_interval"], buffer_capacity=10_000)
    team = OffPolicyTeam(lambda: make_env(S["env"], **S["env_params"]), cfg, seed=S["seed"])
    rows = []
    while team.env_steps < S["steps"]:
        team.env_step()
        team.update()
        if team.steps % cfg.log_interval == 0:
            m = team.metrics()
            rows.append([m["iteration"], m["env_steps"], m["best_return"], m["entropy"], m["ratio_mean"],
                         m["ratio_max"], m["extra"]["q_loss"], param_hash(team.agents[0].policy_params)])
    sac_ok = format_rows(rows) == (data / "golden_sac.csv").read_text()
    record_property("detail", f"ppo {'bit-exact' if ppo_ok else 'MISMATCH'}, sac {'bit-exact' if sac_ok else 'MISMATCH'}")
    assert ppo_ok and sac_ok


# -- 9 ---------------------------------------------------------------------

@pytest.mark.criterion(9, "shared off-policy batches draw N/K samples per owner")
def test_batch_composition(record_property):
    K, N = 5, 256
    bufs = [ReplayBuffer(500, 2, 1, owner=k) for k in range(K)]
    for b in bufs:
        for t in range(300):
            b.add(np.zeros(2), np.zeros(1), 0.0, np.zeros(2), False)
    rng = np.random.default_rng(4)
    expected = sorted([N // K] * (K - N % K) + [N // K + 1] * (N % K))
    hist_batch = np.zeros((1000, K), dtype=int)
    hist_buffer = np.zeros((1000, K), dtype=int)
    for i in range(1000):
        hist_batch[i] = np.bincount(sample_share_batch(bufs, N, rng).owner, minlength=K)
        hist_buffer[i] = np.bincount(sample_share_buffer(bufs, i % K, N, rng).owner, minlength=K)
    ok = all(sorted(h.tolist()) == expected for h in np.concatenate([hist_batch, hist_buffer]))
    record_property("detail", f"per-owner counts {sorted(set(hist_batch.ravel().tolist()))} over 2x1000 draws")
    assert ok
    assert set(hist_batch.ravel().tolist()) == {N // K, N // K + 1}


# -- 10 --------------------------------------------------------------------

@pytest.mark.criterion(10, "target gap shrinks by (1 - tau)^m")
def test_polyak_targets(record_property):
    rng = np.random.default_rng(5)
    live = [rng.standard_normal(50) for _ in range(3)]
    targets = TargetPolicySet([rng.standard_normal(50) for _ in range(3)], tau=0.005)
    before = [np.linalg.norm(t - p) for t, p in zip(targets.params, live)]
    for _ in range(100):
        targets.update(live)
    after = [np.linalg.norm(t - p) for t, p in zip(targets.params, live)]
    errs = [abs(a - b * 0.995 ** 100) for a, b in zip(after, before)]
    record_property("detail", f"max abs deviation {max(errs):.1e}")
    assert max(errs) < 1e-10


# -- 11 --------------------------------------------------------------------

def _trend(values):
    x = np.arange(len(values), dtype=np.float64)
    return float(np.polyfit(x, np.asarray(values, dtype=np.float64), 1)[0])


@pytest.mark.criterion(11, "diagnostics are logged; the no-CE ablation degrades and stops via the guard")
def test_diagnostics(run_root, record_property):
    cfg = load_config(CONFIGS / "pointgoal_dice.yaml", ["seeds=[0]"])
    cfg = cfg.with_trainer(use_ce=False).replace(variant="no_ce")
    manifest = run(cfg, run_root / "no_ce")[0]
    rows = _read_metrics(next((run_root / "no_ce").rglob("metrics.csv")))
    has_columns = {"ratio_mean", "ratio_max", "entropy", "grad_cosine"} <= set(rows[0])
    ok = [r for r in rows if r["status"] == "ok"]
    ent = _trend([float(r["entropy"]) for r in ok])
    ratio = _trend([math.log(float(r["ratio_max"])) for r in ok])
    record_property("detail", f"columns present: {has_columns}, entropy slope {ent:+.2e}, log max-ratio slope "
                              f"{ratio:+.2e}, status {manifest['status']} after {len(ok)} iterations")
    assert has_columns
    assert ent < 0 and ratio > 0
    assert manifest["status"] == "nonfinite"


# -- 12 --------------------------------------------------------------------

@pytest.mark.criterion(12, "reruns with the same seed give byte-identical metrics files")
def test_determinism(tmp_path, record_property):
    identical = []
    for name, overrides in (("pointgoal_dice.yaml", ["max_env_steps=3200", "seeds=[11]"]),
                            ("pointgoal_sac.yaml", ["max_env_steps=3000", "seeds=[11]", "offpolicy.warmup_steps=100",
                                                    "offpolicy.log_interval=100"])):
        cfg = load_config(CONFIGS / name, overrides)
        run(cfg, tmp_path / "a" / name)
        run(cfg, tmp_path / "b" / name)
        for f in sorted((tmp_path / "a" / name).rglob("metrics.csv")):
            twin = tmp_path / "b" / name / f.relative_to(tmp_path / "a" / name)
            identical.append(f.read_bytes() == twin.read_bytes() and f.stat().st_size > 0)
    record_property("detail", f"{sum(identical)}/{len(identical)} files identical")
    assert identical and all(identical)
