"""Summaries over finished runs: delimited tables and matplotlib figures."""
from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

SUMMARY_COLUMNS = ["variant", "n_runs", "n_nonfinite", "final_best_mean", "final_best_std", "peak_best_mean",
                   "peak_best_std", "fixed_best_mean", "fixed_best_std", "env_steps"]


def read_metrics(path):
    """Rows of a metrics file as dicts of floats (strings kept for ``variant``/``status``)."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in ("variant", "status"):
                    row[k] = v
                else:
                    try:
                        row[k] = float(v)
                    except (TypeError, ValueError):
                        row[k] = float("nan")
            rows.append(row)
    return rows


def find_runs(metrics_dir):
    runs = []
    for manifest_path in sorted(Path(metrics_dir).rglob("manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        metrics = read_metrics(manifest_path.parent / manifest.get("metrics_file", "metrics.csv"))
        runs.append(dict(manifest=manifest, rows=metrics, path=manifest_path.parent))
    return runs


def _ok_rows(rows):
    return [r for r in rows if r.get("status") == "ok"]


def run_scores(rows, tail=5):
    """Final, peak and fixed-agent best returns for one run.

    ``final`` averages the per-row best-agent return over the last ``tail``
    logging points (best agent re-selected at each point). ``fixed`` picks
    the agent with the highest mean return over the whole run and averages
    that agent's return over the same tail.
    """
    ok = _ok_rows(rows)
    if not ok:
        return dict(final=float("nan"), peak=float("nan"), fixed=float("nan"), env_steps=0.0)
    best = np.array([r["best_return"] for r in ok])
    k = sum(1 for c in ok[0] if c.startswith("return_"))
    per_agent = np.array([[r[f"return_{i}"] for i in range(k)] for r in ok])
    with np.errstate(all="ignore"):
        agent_means = np.nanmean(np.where(np.isfinite(per_agent), per_agent, np.nan), axis=0)
    fixed_agent = int(np.nanargmax(agent_means)) if np.any(np.isfinite(agent_means)) else 0
    return dict(
        final=float(np.nanmean(best[-tail:])),
        peak=float(np.nanmax(best)),
        fixed=float(np.nanmean(per_agent[-tail:, fixed_agent])),
        env_steps=ok[-1]["env_steps"],
    )


def summarize(metrics_dir, tail=5, out_dir=None, figures=True):
    """Per-variant mean and population std over seeds; writes CSV, text table and figures."""
    runs = find_runs(metrics_dir)
    if not runs:
        raise FileNotFoundError(f"no completed runs (manifest.json) under {metrics_dir}")
    groups = {}
    for run in runs:
        groups.setdefault(run["manifest"]["variant"], []).append(run)
    table = []
    for variant, members in groups.items():
        scores = [run_scores(r["rows"], tail) for r in members]
        row = {"variant": variant, "n_runs": len(members),
               "n_nonfinite": sum(r["manifest"]["status"] == "nonfinite" for r in members),
               "env_steps": max(s["env_steps"] for s in scores)}
        for key in ("final", "peak", "fixed"):
            vals = np.array([s[key] for s in scores], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            row[f"{key}_best_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{key}_best_std"] = float(vals.std()) if vals.size else float("nan")
        table.append(row)
    out = Path(out_dir) if out_dir is not None else Path(metrics_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (format(v, ".6g") if isinstance(v, float) else v) for k, v in row.items()})
    text = format_table(table)
    (out / "summary.txt").write_text(text)
    if figures:
        from . import plots

        plots.learning_curves(groups, out / "figures" / "learning_curves.png")
        plots.diagnostics(groups, out / "figures" / "diagnostics.png")
    return table, text


def format_table(table):
    header = ["variant", "runs", "final best (mean ± std)", "peak best (mean ± std)", "nonfinite"]
    lines = []
    for row in table:
        lines.append([row["variant"], str(row["n_runs"]),
                      f"{row['final_best_mean']:.4f} ± {row['final_best_std']:.4f}",
                      f"{row['peak_best_mean']:.4f} ± {row['peak_best_std']:.4f}",
                      str(row["n_nonfinite"])])
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt_line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [fmt_line(header), fmt_line(["-" * w for w in widths])]
    out += [fmt_line(l) for l in lines]
    return "\n".join(out) + "\n"


def curve(rows, column, grid):
    """``column`` of ``rows`` resampled onto the env-step ``grid`` (step interpolation)."""
    ok = _ok_rows(rows)
    if not ok:
        return np.full(len(grid), np.nan)
    x = np.array([r["env_steps"] for r in ok])
    y = np.array([r[column] for r in ok])
    idx = np.searchsorted(x, grid, side="right") - 1
    out = np.where(idx >= 0, y[np.clip(idx, 0, None)], np.nan)
    out[grid > x[-1]] = np.nan
    return out


def mean_curve(members, column, n_points=100):
    top = max((r["rows"][-1]["env_steps"] for r in members if r["rows"]), default=0.0)
    grid = np.linspace(0.0, top, n_points) if top > 0 else np.zeros(1)
    ys = np.array([curve(r["rows"], column, grid) for r in members])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return grid, np.nanmean(ys, axis=0), np.nanstd(ys, axis=0)
