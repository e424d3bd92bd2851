"""Figures written next to the CSV reports (file output only, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402


def mean_ci(values):
    """Mean and half-width of the two-sided 95% Student-t interval."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v.mean()), 0.0
    t = stats.t.ppf(0.975, len(v) - 1)
    return float(v.mean()), float(t * v.std(ddof=1) / np.sqrt(len(v)))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(param: str, groups: dict, path) -> None:
    """Mean return with 95% CI against the swept value; ``groups`` maps value -> returns."""
    xs = list(groups)
    ci = [mean_ci(groups[x]) for x in xs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pos = np.arange(len(xs))
    ax.errorbar(pos, [m for m, _ in ci], yerr=[h for _, h in ci], marker="o", capsize=3)
    ax.set_xticks(pos, [str(x) for x in xs])
    ax.set_xlabel(param)
    ax.set_ylabel("mean return")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_ablation(groups: dict, path) -> None:
    """Bar per flag combination with 95% CI whiskers."""
    labels = list(groups)
    ci = [mean_ci(groups[k]) for k in labels]
    fig, ax = plt.subplots(figsize=(7, 3.8))
    pos = np.arange(len(labels))
    ax.bar(pos, [m for m, _ in ci], yerr=[h for _, h in ci], capsize=3, color="0.6")
    ax.set_xticks(pos, labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean return")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_runtime(stage_seconds: dict, path) -> None:
    """Stacked per-stage runtime, one bar per run label; values are lists of dicts."""
    labels = list(stage_seconds)
    stages = list(next(iter(stage_seconds.values()))[0]) if labels else []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottom = np.zeros(len(labels))
    for stage in stages:
        h = np.array([np.mean([r[stage] for r in stage_seconds[k]]) for k in labels])
        ax.bar(np.arange(len(labels)), h, bottom=bottom, label=stage)
        bottom += h
    ax.set_xticks(np.arange(len(labels)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("seconds per run")
    ax.legend(fontsize=7)
    _save(fig, path)
