"""Figure rendering for evaluation reports.

Every report path that writes delimited output can also render the matching
figure next to it; the CSV stays the canonical artifact, the PNG is for
eyeballs. All functions take explicit output paths and use the Agg backend.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_rollout(data, columns, out_path, title=None):
    """Two-panel rollout figure: xy track vs reference, and error over time.

    `data` is the rollout array as written by the harness (must contain the
    ref_{x,y,z} columns)."""
    col = {name: i for i, name in enumerate(columns)}
    t = data[:, col["t"]]
    p = data[:, [col["p_x"], col["p_y"], col["p_z"]]]
    ref = data[:, [col["ref_x"], col["ref_y"], col["ref_z"]]]
    err = np.linalg.norm(p - ref, axis=1)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(ref[:, 0], ref[:, 1], "k--", lw=1.2, label="reference")
    ax1.plot(p[:, 0], p[:, 1], "C0-", lw=1.0, label="flown")
    ax1.set_xlabel("x [m]")
    ax1.set_ylabel("y [m]")
    ax1.set_aspect("equal", adjustable="datalim")
    ax1.legend(loc="best", fontsize=8)
    ax2.plot(t, err, "C3-", lw=1.0)
    ax2.set_xlabel("t [s]")
    ax2.set_ylabel("position error [m]")
    ax2.set_ylim(bottom=0.0)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_bank(rows, out_path, title=None):
    """Per-trajectory error bars for one bank; crashed rows marked."""
    idx = [r["index"] for r in rows]
    errs = [r["mean_error"] if not r["crashed"] else 0.0 for r in rows]
    crashed = [r["crashed"] for r in rows]
    colors = ["C3" if c else "C0" for c in crashed]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(idx, errs, color=colors)
    for i, c in zip(idx, crashed):
        if c:
            ax.text(i, 0.01, "crash", rotation=90, ha="center", va="bottom", color="C3", fontsize=8)
    ax.set_xlabel("trajectory")
    ax.set_ylabel("mean tracking error [m]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_comparison(table, out_path, title=None):
    """Bar chart over controllers/variants: mean with std whiskers, crashes
    and failures annotated. `table` rows: name, mean, std, crashes, status."""
    names = [r["name"] for r in table]
    means = [0.0 if r.get("status") == "failed" or r["mean"] is None else r["mean"] for r in table]
    stds = [0.0 if r.get("std") is None else r["std"] for r in table]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 3.8))
    bars = ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="C0")
    for i, r in enumerate(table):
        if r.get("status") == "failed" or r["mean"] is None:
            ax.text(i, 0.01, "failed", rotation=90, ha="center", va="bottom", color="C3", fontsize=9)
        elif r.get("crashes"):
            ax.text(i, means[i], f"{r['crashes']} crash", ha="center", va="bottom", fontsize=7)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean tracking error [m]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_learning_curve(rows, out_path, title=None):
    """Training log: return and tracking error against environment steps."""
    steps = [r["step"] for r in rows]
    rets = [r["mean_return"] for r in rows]
    errs = [r["mean_tracking_error"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax1.plot(steps, rets, "C0-")
    ax1.set_xlabel("environment steps")
    ax1.set_ylabel("mean episode return")
    ax2.plot(steps, errs, "C3-")
    ax2.set_xlabel("environment steps")
    ax2.set_ylabel("mean tracking error [m]")
    ax2.set_yscale("log")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
