"""Figure rendering for run summaries (non-interactive backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import mean_curve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # fixed metadata keeps re-rendered files comparable
    "svg.hashsalt": "dice",
}


def _band(ax, members, column, label):
    x, mean, std = mean_curve(members, column)
    line, = ax.plot(x, mean, lw=1.2, label=label)
    ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, lw=0)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def learning_curves(groups, path):
    """Best-agent return against env steps, mean and std band over seeds per variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for variant, members in sorted(groups.items()):
            _band(ax, members, "best_return", variant)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("best-agent return")
        ax.legend(frameon=False)
        return _save(fig, path)


DIAGNOSTICS = (
    ("entropy", "policy entropy"),
    ("ratio_max", "max probability ratio"),
    ("grad_cosine", "cos(task grad, diversity grad)"),
    ("pairwise_diversity", "pairwise diversity"),
)


def diagnostics(groups, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(DIAGNOSTICS), figsize=(3.0 * len(DIAGNOSTICS), 2.6))
        for ax, (column, label) in zip(axes, DIAGNOSTICS):
            for variant, members in sorted(groups.items()):
                _band(ax, members, column, variant)
            ax.set_xlabel("environment steps")
            ax.set_ylabel(label)
            if column == "ratio_max":
                ax.set_yscale("log")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
