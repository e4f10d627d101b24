"""Top-down trajectory plots (SVG) with a CSV twin of the plotted numbers."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluation import associate, evaluate_ate
from .trajectory import Trajectory


def _plot_rows(est: Trajectory, truth: Optional[Trajectory]):
    """Columns for the CSV: estimate (aligned to truth if given), truth, 2-sigma radius."""
    pos = est.positions
    R = np.eye(3)
    if truth is not None:
        ate = evaluate_ate(est, truth)
        R = ate.rotation
        pos = est.positions @ ate.rotation.T + ate.translation
    sigma = None
    if est.position_covariances is not None:
        C = R @ est.position_covariances @ R.T
        # radius of the horizontal 2-sigma circle, worst axis
        sigma = 2.0 * np.sqrt(np.maximum(np.linalg.eigvalsh(C[:, :2, :2])[:, -1], 0.0))
    gt_pos = None
    if truth is not None:
        ie, it = associate(est.times, truth.times)
        gt_pos = np.full_like(pos, np.nan)
        gt_pos[ie] = truth.positions[it]
    return pos, gt_pos, sigma


def write_plot_csv(path, est: Trajectory, truth: Optional[Trajectory] = None) -> None:
    pos, gt_pos, sigma = _plot_rows(est, truth)
    header = ["t", "x", "y", "z"]
    if gt_pos is not None:
        header += ["gt_x", "gt_y", "gt_z"]
    if sigma is not None:
        header.append("sigma2_xy")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(est)):
            row = [f"{est.times[k]:.9f}", *(f"{v:.6g}" for v in pos[k])]
            if gt_pos is not None:
                row += [f"{v:.6g}" for v in gt_pos[k]]
            if sigma is not None:
                row.append(f"{sigma[k]:.6g}")
            w.writerow(row)


def plot_trajectory(est: Trajectory, truth: Optional[Trajectory] = None, svg_path=None,
                    csv_path=None, title: str = ""):
    """Plot the estimate in the xy-plane, overlaying ground truth and the 2-sigma band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos, gt_pos, sigma = _plot_rows(est, truth)
    fig, ax = plt.subplots(figsize=(6, 6))
    if sigma is not None:
        # uncertainty band as translucent circles along the path
        for k in range(0, len(pos), max(1, len(pos) // 200)):
            ax.add_patch(plt.Circle(pos[k, :2], sigma[k], color="tab:blue", alpha=0.06, lw=0))
    if gt_pos is not None:
        ok = np.all(np.isfinite(gt_pos), axis=1)
        ax.plot(gt_pos[ok, 0], gt_pos[ok, 1], color="k", lw=1.0, label="ground truth")
    ax.plot(pos[:, 0], pos[:, 1], color="tab:blue", lw=1.2, label="estimate")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    if svg_path is not None:
        fig.savefig(svg_path, format="svg")
    plt.close(fig)
    if csv_path is not None:
        write_plot_csv(csv_path, est, truth)
    return fig
