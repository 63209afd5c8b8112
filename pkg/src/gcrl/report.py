"""Learning-curve reports: matplotlib figures rendered to files alongside the
smoothed CSV data they are drawn from.

Run directories are grouped by label (directory name up to the trailing
`-seedN` suffix, if any); each group draws a mean line bracketed by the
min/max band across its seeds. Smoothing is a plain trailing moving average
and never touches the stored raw metrics.
"""

from __future__ import annotations

import os
import re
from collections import OrderedDict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import read_summary

_SEED_SUFFIX = re.compile(r"[-_]seed\d+$")

CURVE_COLUMNS = (
    ("reward_per_agent_step", "mean reward per agent per step"),
    ("kill_death_ratio", "kill-death ratio"),
    ("attacks", "attacks between agents"),
    ("mean_delay", "mean delay (timesteps)"),
    ("throughput", "delivered packets per timestep"),
)


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; shorter prefixes average what exists."""
    out = np.empty(len(values))
    csum = np.cumsum(np.insert(values, 0, 0.0))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def group_runs(run_dirs):
    groups = OrderedDict()
    for d in run_dirs:
        label = _SEED_SUFFIX.sub("", os.path.basename(os.path.normpath(d)))
        groups.setdefault(label, []).append(d)
    return groups


def _column(run_dir, column):
    cols = read_summary(os.path.join(run_dir, "summary.csv"))
    vals = cols.get(column)
    if vals is None or all(v is None for v in vals):
        return None
    return np.array([np.nan if v is None else v for v in vals], dtype=float)


def render_reports(run_dirs, out_dir, window: int = 20):
    """Write one figure + smoothed CSV per metric that any run produced.

    Returns the list of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    groups = group_runs(run_dirs)
    written = []
    for column, ylabel in CURVE_COLUMNS:
        series = OrderedDict()
        for label, dirs in groups.items():
            curves = [c for c in (_column(d, column) for d in dirs) if c is not None]
            if curves:
                n = min(len(c) for c in curves)
                series[label] = np.stack([smooth(c[:n], window) for c in curves])
        if not series:
            continue

        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        csv_lines = ["label,episode,mean,min,max"]
        for label, stack in series.items():
            episodes = np.arange(len(stack[0]))
            mean = np.nanmean(stack, axis=0)
            lo = np.nanmin(stack, axis=0)
            hi = np.nanmax(stack, axis=0)
            ax.plot(episodes, mean, label=label)
            ax.fill_between(episodes, lo, hi, alpha=0.2)
            for e in episodes:
                csv_lines.append(f"{label},{e},{mean[e]!r},{lo[e]!r},{hi[e]!r}")
        ax.set_xlabel("episode")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()

        fig_path = os.path.join(out_dir, f"curve_{column}.png")
        csv_path = os.path.join(out_dir, f"curve_{column}.csv")
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("\n".join(csv_lines) + "\n")
        written.extend([fig_path, csv_path])
    return written
