"""Figure rendering for report paths; every CSV output gets a PNG sibling."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_landscape(rows, path) -> Path:
    """Mean plan energy vs corruption level."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = [r.noise_level for r in rows]
    y = [r.mean_energy for r in rows]
    err = [r.stderr for r in rows]
    ax.errorbar(x, y, yerr=err, marker="o", capsize=3)
    ax.set_xlabel("noise level")
    ax.set_ylabel("mean plan energy")
    ax.set_title("Energy vs trajectory corruption")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_loss(losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_iteration_curve(curve, path) -> Path:
    """Success rate vs number of refinement iterations."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = [row["iters"] for row in curve]
    y = [row["success_rate"] for row in curve]
    err = [row["stderr"] for row in curve]
    ax.errorbar(x, y, yerr=err, marker="o", capsize=3)
    ax.set_xlabel("refinement iterations")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.set_title("Success vs refinement budget")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_success_bars(labels, rates, errs, path, title="Success rate") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = range(len(labels))
    ax.bar(xs, rates, yerr=errs, capsize=3, color="tab:blue")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
