#!/usr/bin/env python3
"""Desk-scale experiment battery: trains every variant the directional
acceptance checks compare, evaluates the final checkpoints, runs the routing
generalization sweeps, renders report figures, and collects everything into
results/summary.json.

Idempotent: completed runs (final checkpoint present) are skipped, so the
battery can be re-launched after an interruption. Two training processes run
concurrently, each pinned to one BLAS thread.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

from gcrl.config import ablation_presets, save_config  # noqa: E402
from gcrl.harness import evaluate, generalization_sweep  # noqa: E402

SEEDS = (1, 2, 3)
SWEEP_LOADS = (20, 40, 60)
EVAL_SEED = 1000
SWEEP_SEED = 2000

# (priority, run-name prefix, preset, scenario)
RUN_MATRIX = (
    (0, "routing-dgn", "dgn", "routing"),
    (0, "routing-dqn", "dqn", "routing"),
    (1, "battle-dgn", "dgn", "battle"),
    (1, "battle-dgn-m", "dgn-m", "battle"),
    (1, "battle-dqn", "dqn", "battle"),
    (1, "battle-layers-1", "layers-1", "battle"),
    (2, "jungle-dgn", "dgn", "jungle"),
    (2, "jungle-dqn", "dqn", "jungle"),
    (3, "battle-dgn-r", "dgn-r", "battle"),
    (3, "battle-unfixed", "unfixed-graph", "battle"),
)


def build_jobs(results_dir: str, episodes_override: int | None):
    jobs = []
    for priority, prefix, preset, scenario in RUN_MATRIX:
        for seed in SEEDS:
            name = f"{prefix}-seed{seed}"
            out_dir = os.path.join(results_dir, "runs", name)
            cfg = ablation_presets(preset, scenario=scenario, scale="desk",
                                   seed=seed)
            if episodes_override:
                cfg = dataclasses.replace(cfg, episodes=episodes_override)
            jobs.append({
                "priority": priority, "name": name, "preset": preset,
                "scenario": scenario, "seed": seed, "config": cfg,
                "out_dir": out_dir,
                "final": os.path.join(out_dir, "checkpoint_final.gckp"),
            })
    jobs.sort(key=lambda j: (j["priority"], j["seed"]))
    return jobs


def launch(job):
    os.makedirs(job["out_dir"], exist_ok=True)
    cfg_path = os.path.join(job["out_dir"], "config.txt")
    save_config(cfg_path, job["config"])
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1",
               MKL_NUM_THREADS="1")
    log = open(os.path.join(job["out_dir"], "train.log"), "a")
    proc = subprocess.Popen(
        [sys.executable, "-m", "gcrl.cli", "train", "--config", cfg_path,
         "--seed", str(job["seed"]), "--out", job["out_dir"]],
        stdout=log, stderr=subprocess.STDOUT, env=env, cwd=ROOT)
    return proc, log


def run_trainings(jobs, workers: int):
    pending = [j for j in jobs if not os.path.exists(j["final"])]
    done = [j for j in jobs if os.path.exists(j["final"])]
    for j in done:
        print(f"[skip] {j['name']} (already complete)", flush=True)
    active = []
    while pending or active:
        while pending and len(active) < workers:
            job = pending.pop(0)
            proc, log = launch(job)
            active.append((job, proc, log, time.time()))
            print(f"[start] {job['name']}", flush=True)
        time.sleep(10)
        still = []
        for job, proc, log, t0 in active:
            code = proc.poll()
            if code is None:
                still.append((job, proc, log, t0))
                continue
            log.close()
            minutes = (time.time() - t0) / 60
            if code == 0 and os.path.exists(job["final"]):
                print(f"[done] {job['name']} ({minutes:.1f} min)", flush=True)
            else:
                print(f"[FAIL] {job['name']} exit={code} ({minutes:.1f} min)",
                      flush=True)
        active = still


def collect(jobs, results_dir: str, sweep_games: int):
    summary = {}
    for job in jobs:
        entry = {
            "scenario": job["scenario"], "preset": job["preset"],
            "seed": job["seed"], "out_dir": job["out_dir"],
            "episodes": job["config"].episodes,
            "completed": os.path.exists(job["final"]),
            "eval": None, "sweep": None,
        }
        if entry["completed"]:
            eval_path = os.path.join(job["out_dir"], "eval.json")
            if os.path.exists(eval_path):
                entry["eval"] = json.load(open(eval_path))
            else:
                res = evaluate(job["final"], eval_seed=EVAL_SEED)
                entry["eval"] = res.to_dict()
                with open(eval_path, "w") as f:
                    json.dump(entry["eval"], f, sort_keys=True, indent=2)
            if job["scenario"] == "routing":
                sweep_path = os.path.join(job["out_dir"], "sweep.json")
                if os.path.exists(sweep_path):
                    entry["sweep"] = json.load(open(sweep_path))
                else:
                    rows = generalization_sweep(job["final"], SWEEP_LOADS,
                                                games=sweep_games,
                                                eval_seed=SWEEP_SEED)
                    entry["sweep"] = rows
                    with open(sweep_path, "w") as f:
                        json.dump(rows, f, sort_keys=True, indent=2)
            print(f"[collect] {job['name']}", flush=True)
        summary[job["name"]] = entry
    path = os.path.join(results_dir, "summary.json")
    with open(path, "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    print(f"[summary] {path}", flush=True)
    return summary


def render_reports(jobs, results_dir: str):
    from gcrl.report import render_reports as render

    by_scenario = {}
    for job in jobs:
        if os.path.exists(job["final"]):
            by_scenario.setdefault(job["scenario"], []).append(job["out_dir"])
    for scenario, dirs in by_scenario.items():
        out = os.path.join(results_dir, "reports", scenario)
        written = render(dirs, out)
        print(f"[report] {scenario}: {len(written)} files", flush=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--results", default=os.path.join(ROOT, "results"))
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--episodes", type=int, default=None,
                    help="override episode counts (smoke testing)")
    ap.add_argument("--sweep-games", type=int, default=10)
    ap.add_argument("--skip-training", action="store_true",
                    help="only collect/evaluate existing runs")
    args = ap.parse_args()

    jobs = build_jobs(args.results, args.episodes)
    if not args.skip_training:
        run_trainings(jobs, args.workers)
    collect(jobs, args.results, args.sweep_games)
    render_reports(jobs, args.results)


if __name__ == "__main__":
    main()
