"""Figure rendering for the report paths (eval, ablate).

All figures are written to files next to the delimited outputs; nothing is
shown interactively.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_trajectories(path: str, named_trajectories: dict[str, list],
                      title: str = "Trajectory (top-down)") -> None:
    """Top-down xy plot of one or more (t, Pose3) trajectories."""
    fig, ax = plt.subplots(figsize=(7, 6))
    for label, traj in named_trajectories.items():
        xs = [p.t[0] for _, p in traj]
        ys = [p.t[1] for _, p in traj]
        ax.plot(ys, xs, label=label, linewidth=1.2)
        if traj:
            ax.plot(ys[0], xs[0], "o", color=ax.lines[-1].get_color(), markersize=5)
            ax.plot(ys[-1], xs[-1], "x", color=ax.lines[-1].get_color(), markersize=7)
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_map(path: str, landmarks: list, truth_objects: list[dict] | None = None,
             trajectory: list | None = None, title: str = "Semantic map") -> None:
    """Landmarks (and optionally true objects and the trajectory), top-down."""
    fig, ax = plt.subplots(figsize=(7, 6))
    if trajectory:
        xs = [p.t[0] for _, p in trajectory]
        ys = [p.t[1] for _, p in trajectory]
        ax.plot(ys, xs, color="0.6", linewidth=0.8, label="trajectory")
    if truth_objects:
        tx = [o["position"][0] for o in truth_objects]
        ty = [o["position"][1] for o in truth_objects]
        ax.scatter(ty, tx, marker="s", s=70, facecolors="none",
                   edgecolors="tab:green", label="true objects")
    if landmarks:
        lx = [lm.position[0] for lm in landmarks]
        ly = [lm.position[1] for lm in landmarks]
        counts = [lm.observation_count for lm in landmarks]
        sc = ax.scatter(ly, lx, c=counts, cmap="viridis", s=45, label="landmarks")
        fig.colorbar(sc, ax=ax, label="observations")
        for lm in landmarks:
            ax.annotate(str(lm.id), (lm.position[1], lm.position[0]),
                        fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(path: str, rows: list[dict]) -> None:
    """Bar chart of APE and map precision per ablation configuration."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    names = [r["config"] for r in rows]
    x = np.arange(len(names))
    ax1.bar(x, [r["ape"] for r in rows], color="tab:blue")
    ax1.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax1.set_ylabel("APE [m]")
    ax1.grid(True, axis="y", alpha=0.3)
    ax2.bar(x - 0.2, [r["precision"] for r in rows], width=0.4,
            label="precision", color="tab:orange")
    ax2.bar(x + 0.2, [r["recall"] for r in rows], width=0.4,
            label="recall", color="tab:green")
    ax2.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax2.set_ylim(0, 1.05)
    ax2.grid(True, axis="y", alpha=0.3)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
