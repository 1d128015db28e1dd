"""Render figures from a run directory's delimited output.

Reads the CSVs a finished run left behind and writes PNGs next to them; the
training and evaluation code paths never import this module.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError

FIG_KW = {"dpi": 150, "bbox_inches": "tight"}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def accuracy_figure(results_csv: Path, out_path: Path, mode: str) -> bool:
    """Per-task accuracy (mean over seeds) as training advances through tasks."""
    rows = [r for r in _read_csv(results_csv) if r["eval_mode"] == mode]
    if not rows:
        return False
    acc: dict[tuple[int, int], list[float]] = defaultdict(list)
    for r in rows:
        acc[(int(r["after_task"]), int(r["eval_task"]))].append(float(r["accuracy"]))
    tasks = sorted({k[1] for k in acc})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for task in tasks:
        xs = sorted(a for a, t in acc if t == task)
        ys = [sum(acc[(a, task)]) / len(acc[(a, task)]) for a in xs]
        ax.plot(xs, ys, marker="o", label=f"task {task}")
    ax.set_xlabel("tasks trained")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(mode.replace("_", "-"))
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(out_path, **FIG_KW)
    plt.close(fig)
    return True


def weight_figure(run_dir: Path, out_path: Path) -> bool:
    """Mean emitted weights per step, averaged over the seed traces."""
    traces = sorted(run_dir.glob("trace_seed*.csv"))
    if not traces:
        return False
    series: dict[str, dict[int, list[float]]] = {
        "mean_w_new": defaultdict(list),
        "mean_w_buf": defaultdict(list),
        "mean_w_kd": defaultdict(list),
    }
    for path in traces:
        for r in _read_csv(path):
            for key in series:
                if r.get(key):
                    series[key][int(r["step"])].append(float(r[key]))
    if not any(series[k] for k in series):
        return False
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    labels = {"mean_w_new": "incoming", "mean_w_buf": "buffer", "mean_w_kd": "distill"}
    for key, by_step in series.items():
        if not by_step:
            continue
        xs = sorted(by_step)
        ys = [sum(by_step[s]) / len(by_step[s]) for s in xs]
        ax.plot(xs, ys, label=labels[key], linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("mean weight")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(out_path, **FIG_KW)
    plt.close(fig)
    return True


def loss_figure(run_dir: Path, out_path: Path) -> bool:
    """Inner and outer loss per step for the first seed trace."""
    traces = sorted(run_dir.glob("trace_seed*.csv"))
    if not traces:
        return False
    rows = _read_csv(traces[0])
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xs = [int(r["step"]) for r in rows if r["inner_loss"]]
    ys = [float(r["inner_loss"]) for r in rows if r["inner_loss"]]
    ax.plot(xs, ys, label="inner", linewidth=0.9)
    xo = [int(r["step"]) for r in rows if r["outer_loss"]]
    yo = [float(r["outer_loss"]) for r in rows if r["outer_loss"]]
    if xo:
        ax.plot(xo, yo, label="outer", linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(out_path, **FIG_KW)
    plt.close(fig)
    return True


def render_run_figures(run_dir, out_dir=None) -> list[Path]:
    """Render every figure the directory's CSVs support; returns written paths."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a directory")
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    results = run_dir / "results.csv"
    if results.is_file():
        for mode in ("class_il", "task_il"):
            target = out_dir / f"accuracy_{mode}.png"
            if accuracy_figure(results, target, mode):
                written.append(target)
    target = out_dir / "weights.png"
    if weight_figure(run_dir, target):
        written.append(target)
    target = out_dir / "loss.png"
    if loss_figure(run_dir, target):
        written.append(target)
    if not written:
        raise ConfigError(f"{run_dir} holds no renderable run output")
    return written
