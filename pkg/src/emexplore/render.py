"""Plots for trials and batches (SVG via the Agg backend, no display)."""

from __future__ import annotations

import csv
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .harness import mean_curve, read_csv

_PLANNER_STYLE = {
    "em2": ("tab:blue", "-"),
    "em3": ("tab:purple", "--"),
    "ce": ("tab:orange", "-."),
    "bsp": ("tab:green", ":"),
}


def _style(name: str) -> tuple[str, str]:
    return _PLANNER_STYLE.get(name, ("tab:gray", "-"))


def plot_batch(out_dir: str, out_path: str, bin_m: float = 10.0) -> str:
    """Three-panel batch figure: explored ratio and localization RMSE
    against team travel distance, plus distance needed to hit the explored
    target.  Returns the written path."""
    planners = sorted(
        os.path.basename(p) for p in glob.glob(os.path.join(out_dir, "*")) if os.path.isdir(p)
    )
    if not planners:
        raise FileNotFoundError(f"no planner directories under {out_dir}")

    fig, axes = plt.subplots(1, 3, figsize=(13.5, 4.0))
    for name in planners:
        color, ls = _style(name)
        d, explored = mean_curve(out_dir, name, "explored_ratio", bin_m)
        axes[0].plot(d, explored, color=color, ls=ls, label=name)
        d, rmse = mean_curve(out_dir, name, "loc_rmse_m", bin_m)
        axes[1].plot(d, rmse, color=color, ls=ls, label=name)
    axes[0].set_xlabel("team distance [m]")
    axes[0].set_ylabel("explored ratio")
    axes[0].set_ylim(0.0, 1.0)
    axes[1].set_xlabel("team distance [m]")
    axes[1].set_ylabel("localization RMSE [m]")
    axes[0].legend()

    labels, means, stds = [], [], []
    for name in planners:
        vals = []
        for path in sorted(glob.glob(os.path.join(out_dir, name, "*_summary.csv"))):
            for row in read_csv(path):
                v = float(row["distance_at_explored_target_m"])
                if v >= 0:
                    vals.append(v)
        if vals:
            labels.append(name)
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals)))
    if labels:
        x = np.arange(len(labels))
        colors = [_style(n)[0] for n in labels]
        axes[2].bar(x, means, yerr=stds, color=colors, capsize=4)
        axes[2].set_xticks(x, labels)
        axes[2].set_ylabel("distance to explored target [m]")
    else:
        axes[2].set_axis_off()

    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_trial(trial_dir: str, prefix: str, out_path: str) -> str:
    """Map view of one trial: true and estimated trajectories per robot,
    landmark truth (circles) and estimates (crosses)."""
    with open(os.path.join(trial_dir, f"{prefix}_steps.csv"), newline="") as fh:
        steps = list(csv.DictReader(fh))
    with open(os.path.join(trial_dir, f"{prefix}_landmarks.csv"), newline="") as fh:
        lms = list(csv.DictReader(fh))
    if not steps:
        raise ValueError("steps table is empty")
    n_robots = 0
    while f"r{n_robots}_true_x_m" in steps[0]:
        n_robots += 1

    fig, ax = plt.subplots(figsize=(7.0, 7.0))
    cmap = plt.get_cmap("tab10")
    for i in range(n_robots):
        tx = [float(r[f"r{i}_true_x_m"]) for r in steps]
        ty = [float(r[f"r{i}_true_y_m"]) for r in steps]
        ex = [float(r[f"r{i}_est_x_m"]) for r in steps]
        ey = [float(r[f"r{i}_est_y_m"]) for r in steps]
        ax.plot(tx, ty, color=cmap(i), lw=1.2, label=f"robot {i} true")
        ax.plot(ex, ey, color=cmap(i), lw=0.9, ls="--", alpha=0.7, label=f"robot {i} est")
        ax.plot(tx[0], ty[0], color=cmap(i), marker="o", ms=6)
    for r in lms:
        ax.add_patch(
            plt.Circle((float(r["true_x_m"]), float(r["true_y_m"])), 1.0, fill=False, color="k", lw=0.8)
        )
        if r["observed"] == "1":
            ax.plot(float(r["est_x_m"]), float(r["est_y_m"]), "kx", ms=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
