"""Per-episode metrics: append-only JSONL records plus a flat CSV summary.

One record per episode with a schema that is stable across scenarios
(scenario-specific extras are null where they do not apply). Files contain no
timestamps or absolute paths, so equal runs produce byte-identical output.
"""

from __future__ import annotations

import json
import os

FIELDS = (
    "episode",
    "reward_per_agent_step",
    "reward_episode_total",
    "epsilon",
    "train_steps",
    "loss_mean",
    "td_mean",
    "kl_mean",
    "kills",
    "deaths",
    "kill_death_ratio",
    "attacks",
    "mean_delay",
    "throughput",
    "delivered",
)


def _format_csv(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.jsonl_path = os.path.join(out_dir, "metrics.jsonl")
        self.csv_path = os.path.join(out_dir, "summary.csv")
        if not os.path.exists(self.csv_path):
            with open(self.csv_path, "w", encoding="utf-8") as f:
                f.write(",".join(FIELDS) + "\n")

    def write(self, record: dict):
        row = {k: record.get(k) for k in FIELDS}
        with open(self.jsonl_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        with open(self.csv_path, "a", encoding="utf-8") as f:
            f.write(",".join(_format_csv(row[k]) for k in FIELDS) + "\n")


def read_metrics(path: str):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def read_summary(csv_path: str):
    """CSV summary as a dict of column -> list (floats where possible)."""
    with open(csv_path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        cols = {h: [] for h in header}
        for line in f:
            parts = line.rstrip("\n").split(",")
            for h, v in zip(header, parts):
                if v == "":
                    cols[h].append(None)
                else:
                    try:
                        cols[h].append(float(v))
                    except ValueError:
                        cols[h].append(v)
    return cols
