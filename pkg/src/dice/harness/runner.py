"""Run experiments and write metrics files plus a manifest per (variant, seed)."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

from ..envs import make_env
from ..numerics import NonFiniteError
from ..offpolicy import OffPolicyTeam
from ..onpolicy import Team, train_iteration
from .config import ExperimentConfig, git_blob_hash

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
BASE_COLUMNS = ["iteration", "env_steps", "seed", "variant", "n_agents", "best_return", "best_agent",
                "mean_return", "diversity_mean", "pairwise_diversity", "entropy", "ratio_mean", "ratio_max",
                "grad_cosine", "clip_frac", "ratio_clip_frac", "task_objective", "q_loss", "qd_loss", "alpha",
                "status"]

ABLATIONS = {
    "full": {},
    "no_ce": {"use_ce": False},
    "no_dr": {"use_dr": False},
    "dvn": {"use_dvn": True},
    "na": {"use_na": True},
    "no_tsc": {"use_tsc": False},
    "no_du": {"use_du": False},
}
OFFPOLICY_ABLATIONS = {
    "full": {},
    "no_ce": {"mode": "independent"},
    "no_dr": {"use_dr": False},
    "no_du": {"use_du": False},
}


def metric_columns(n_agents):
    cols = list(BASE_COLUMNS)
    cols[cols.index("mean_return") + 1:cols.index("mean_return") + 1] = [f"return_{k}" for k in range(n_agents)]
    return cols


def fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".10g")
    return str(value)


class MetricsWriter:
    """Append-only CSV writer; every row is flushed so partial runs stay readable."""

    def __init__(self, path, n_agents):
        self.path = Path(path)
        self.columns = metric_columns(n_agents)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict):
        self._writer.writerow([fmt(row.get(c, float("nan"))) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _row(m: dict, seed, variant, n_agents):
    row = {k: v for k, v in m.items() if k not in ("agent_returns", "extra")}
    row.update(m.get("extra") or {})
    returns = m["agent_returns"]
    for k, r in enumerate(returns):
        row[f"return_{k}"] = r
    finite = [r for r in returns if math.isfinite(r)]
    row["mean_return"] = sum(finite) / len(finite) if finite else float("nan")
    row.update(seed=seed, variant=variant, n_agents=n_agents)
    row.setdefault("status", "ok")
    return row


def run_seed(cfg: ExperimentConfig, seed, run_dir):
    """Train one seed; returns the manifest dict (also written to ``run_dir``)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.trainer_config
    make = lambda: make_env(cfg.env_name, **cfg.env_params)  # noqa: E731
    writer = MetricsWriter(run_dir / "metrics.csv", tcfg.n_agents)
    status, detail = "completed", None
    rows = 0
    try:
        if cfg.trainer == "onpolicy":
            team = Team(make, tcfg, seed=seed)
            while team.env_steps < cfg.max_env_steps:
                try:
                    m = train_iteration(team)
                except NonFiniteError as exc:
                    status, detail = "nonfinite", dict(message=str(exc), **exc.context)
                    writer.write(dict(iteration=team.iteration + 1, env_steps=team.env_steps, seed=seed,
                                      variant=cfg.variant, n_agents=tcfg.n_agents, status="nonfinite"))
                    break
                writer.write(_row(vars(m), seed, cfg.variant, tcfg.n_agents))
                rows += 1
        else:
            team = OffPolicyTeam(make, tcfg, seed=seed)
            while team.env_steps < cfg.max_env_steps:
                try:
                    team.env_step()
                    team.update()
                except NonFiniteError as exc:
                    status, detail = "nonfinite", dict(message=str(exc), **exc.context)
                    writer.write(dict(iteration=team.updates, env_steps=team.env_steps, seed=seed,
                                      variant=cfg.variant, n_agents=tcfg.n_agents, status="nonfinite"))
                    break
                if team.steps % tcfg.log_interval == 0:
                    writer.write(_row(team.metrics(), seed, cfg.variant, tcfg.n_agents))
                    rows += 1
    finally:
        writer.close()
    if status == "nonfinite":
        log.warning("seed %s of %s stopped by the non-finite guard: %s", seed, cfg.variant, detail["message"])
    manifest = {
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "variant": cfg.variant,
        "seed": seed,
        "status": status,
        "termination": detail,
        "rows": rows,
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "config_blob_hash": git_blob_hash(json.dumps(cfg.to_dict(), sort_keys=True, indent=2).encode()),
        "metrics_file": "metrics.csv",
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run(cfg: ExperimentConfig, out_dir=None):
    """All seeds of one configuration under ``<out>/<variant>/seed_<s>/``."""
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    manifests = []
    for seed in cfg.seeds:
        log.info("running %s seed %s", cfg.variant, seed)
        manifests.append(run_seed(cfg, seed, root / cfg.variant / f"seed_{seed}"))
    return manifests


def sweep_configs(cfg: ExperimentConfig, ks):
    """One config per team size; the total batch and env-step budget stay fixed."""
    out = []
    for k in ks:
        if k < 1:
            raise ValueError(f"team size must be >= 1, got {k}")
        out.append(cfg.with_trainer(n_agents=k).replace(variant=f"K{k}"))
    return out


def sweep_team_size(cfg: ExperimentConfig, ks, out_dir=None):
    return {c.variant: run(c, out_dir) for c in sweep_configs(cfg, ks)}


def ablation_configs(cfg: ExperimentConfig, variants=None):
    table = ABLATIONS if cfg.trainer == "onpolicy" else OFFPOLICY_ABLATIONS
    names = list(table) if variants is None else list(variants)
    out = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; choose from {list(table)}")
        out.append(cfg.with_trainer(**table[name]).replace(variant=name))
    return out


def ablation_matrix(cfg: ExperimentConfig, out_dir=None, variants=None):
    return {c.variant: run(c, out_dir) for c in ablation_configs(cfg, variants)}
