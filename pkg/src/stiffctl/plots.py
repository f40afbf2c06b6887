"""SVG figures from metrics files: success curves, Q/force/stiffness panels, ablation comparison."""

from __future__ import annotations

import logging
import os
from collections import defaultdict

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from stiffctl.harness import read_metrics  # noqa: E402

log = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "stiffctl"  # stable element ids across runs


def _series(rows, key):
    vals = np.array([r.get(key, np.nan) for r in rows], dtype=float)
    return None if np.all(np.isnan(vals)) else vals


def success_plot(rows, title, path) -> dict:
    """Task/safety/overall curves. Returns the plotted series by label; empty columns are left out."""
    epochs = np.array([r["epoch"] for r in rows])
    plotted = {}
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key, style in (("eval_task", ":"), ("eval_safety", "--"), ("eval_overall", "-")):
        y = _series(rows, key)
        if y is not None:
            label = key.replace("eval_", "")
            ax.plot(epochs, y, style, label=label)
            plotted[label] = y
    for r in rows:
        if r.get("event") == "stage_switch":
            ax.axvline(r["epoch"] - 0.5, color="grey", lw=0.8)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("epoch")
    ax.set_ylabel("success rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return plotted


def data_plot(rows, title, path):
    """Mean Q, estimated force and stiffness; panels with no data are left out."""
    epochs = np.array([r["epoch"] for r in rows])
    panels = [(k, lab) for k, lab in (("mean_q", "mean Q"), ("mean_force", "mean |F| est."), ("mean_k", "mean k")) if _series(rows, k) is not None]
    if not panels:
        return False
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.8), squeeze=False)
    for ax, (key, label) in zip(axes[0], panels):
        ax.plot(epochs, _series(rows, key))
        ax.set_xlabel("epoch")
        ax.set_title(label, fontsize=9)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return True


def ablation_plot(groups: dict, title, path):
    """groups: condition -> list of row lists (one per seed). Mean +- std of overall success."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for cond in sorted(groups):
        runs = groups[cond]
        n = min(len(r) for r in runs)
        ep = np.arange(1, n + 1)
        for ax, key in zip(axes, ("eval_overall", "explore_safety")):
            y = np.array([[row[key] for row in r[:n]] for r in runs])
            mu, sd = y.mean(axis=0), y.std(axis=0)
            ax.plot(ep, mu, label=cond)
            ax.fill_between(ep, mu - sd, mu + sd, alpha=0.2)
    axes[0].set_title("overall success (evaluation)", fontsize=9)
    axes[1].set_title("safety during exploration", fontsize=9)
    for ax in axes:
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("epoch")
    axes[1].legend(fontsize=7, loc="lower right")
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def emit_plots(metrics_files, out_dir) -> dict:
    """Writes one success plot and one data plot per metrics file plus per-env ablation plots.

    Returns {"written": [...], "skipped": [(path, reason), ...]}.
    """
    os.makedirs(out_dir, exist_ok=True)
    written, skipped = [], []
    groups = defaultdict(lambda: defaultdict(list))
    for path in metrics_files:
        try:
            header, rows = read_metrics(path)
            if not rows:
                raise ValueError("no rows")
            exp = header["experiment"]
        except Exception as exc:  # malformed files are reported, not fatal
            log.warning("skipping %s: %s", path, exc)
            skipped.append((str(path), str(exc)))
            continue
        name = f"{exp['env_id']}_{exp['condition']}_seed{exp['seed']}"
        title = f"{exp['env_id']} / {exp['condition']} / seed {exp['seed']}"
        p = os.path.join(out_dir, f"{name}_success.svg")
        success_plot(rows, title, p)
        written.append(p)
        p = os.path.join(out_dir, f"{name}_data.svg")
        if data_plot(rows, title, p):
            written.append(p)
        groups[exp["env_id"]][exp["condition"]].append(rows)
    for env_id, conds in groups.items():
        if len(conds) > 1:
            p = os.path.join(out_dir, f"{env_id}_ablation.svg")
            ablation_plot(conds, f"{env_id}: conditions", p)
            written.append(p)
    return {"written": written, "skipped": skipped}
