"""Figure rendering for the CLI report paths.

Every plot lands next to its CSV/JSON counterpart as a PNG.  Figures are
presentation artifacts; the delimited files remain the machine-readable
source of truth.  PNGs are written without volatile metadata so repeated
runs stay byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "skeldiff"}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_loss_curve(losses, path, title="training loss"):
    """losses: iterable of (step, loss, lr)."""
    steps = [row[0] for row in losses]
    vals = [row[1] for row in losses]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, vals, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_schedule(sched, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    t = np.arange(1, sched.num_steps + 1)
    ax1.plot(t, sched.betas, lw=1.0)
    ax1.set_xlabel("t")
    ax1.set_ylabel(r"$\beta_t$")
    ax2.plot(np.arange(sched.num_steps + 1), sched.alpha_bars, lw=1.0)
    ax2.set_xlabel("t")
    ax2.set_ylabel(r"$\bar{\alpha}_t$")
    fig.suptitle(f"{sched.kind} schedule, T={sched.num_steps}")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    _save(fig, path)


def plot_image_grid(images, path, ncols=8, title=None):
    """Heatmap grid of skeleton images (mean over the coordinate channels)."""
    n = len(images)
    ncols = min(ncols, max(n, 1))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.4 * ncols, 1.4 * nrows), squeeze=False)
    for idx in range(nrows * ncols):
        ax = axes[idx // ncols][idx % ncols]
        ax.set_xticks([])
        ax.set_yticks([])
        if idx < n:
            pixels = images[idx].pixels if hasattr(images[idx], "pixels") else images[idx]
            ax.imshow(np.asarray(pixels).mean(axis=-1), cmap="RdBu_r", vmin=-1.5, vmax=1.5)
        else:
            ax.axis("off")
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_trajectories(seqs, path, joint_axis=2, title="decoded joint trajectories"):
    """One panel per sequence: each joint's chosen coordinate over time."""
    n = len(seqs)
    ncols = min(4, max(n, 1))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 2.2 * nrows), squeeze=False)
    for idx in range(nrows * ncols):
        ax = axes[idx // ncols][idx % ncols]
        if idx < n:
            seq = seqs[idx]
            for j in range(seq.num_joints):
                ax.plot(seq.frames[:, j, joint_axis], lw=0.7)
            ax.set_title(f"{seq.seq_id} (y={seq.label})", fontsize=7)
        else:
            ax.axis("off")
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_metrics_report(report, path):
    """Per-action diversity bars plus the scalar metrics in the title."""
    pad = report["per_action_diversity"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(pad)), pad, color="tab:blue", alpha=0.8)
    ax.set_xlabel("action class")
    ax.set_ylabel("per-action diversity")
    ax.set_title(
        f"fid={report['fid']:.4g}  acc={report['accuracy']:.3f}  overall_div={report['overall_diversity']:.4g}"
    )
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def plot_augmentation_trend(cells, path, mode):
    """Accuracy vs synthetic proportion with 95% CI bars.

    cells: iterable of dicts with proportion / mean_accuracy / ci95_half.
    """
    props = [c["proportion"] for c in cells]
    means = [c["mean_accuracy"] for c in cells]
    errs = [c["ci95_half"] for c in cells]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.errorbar(props, means, yerr=errs, marker="o", capsize=4, lw=1.2)
    ax.set_xlabel(f"synthetic proportion ({mode})")
    ax.set_ylabel("eval accuracy")
    ax.set_title(f"{mode} augmentation trend (mean ± 95% CI)")
    ax.grid(alpha=0.3)
    _save(fig, path)
