"""Matplotlib renderings of the delimited outputs; every report command saves
these next to its CSV/PGM files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path, meta):
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata={"Description": meta} if str(path).endswith(".png") else None)
    plt.close(fig)


def training_curves(rows, path, meta=""):
    it = [r["iter"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    lower = [r.get("lower", np.nan) for r in rows]
    upper = [r.get("upper", np.nan) for r in rows]
    ax1.plot(it, lower, label="lower bound", lw=1)
    if np.any(np.isfinite(upper)):
        ax1.plot(it, upper, label="upper bound", lw=1)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("bound value")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(it, [r.get("energy_data", np.nan) for r in rows], label="energy(data)", lw=1)
    ax2.plot(it, [r.get("energy_gen", np.nan) for r in rows], label="energy(gen)", lw=1)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean energy")
    ax2.legend(fontsize=8)
    ax2.grid(alpha=0.3)
    _finish(fig, path, meta)


def sample_scatter(samples, path, title="generator samples", meta=""):
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.4, linewidths=0)
    ax.set_title(title, fontsize=9)
    ax.set_xlim(-3, 3)
    ax.set_ylim(-3, 3)
    ax.set_aspect("equal")
    _finish(fig, path, meta)


def density_heatmap(values, extent, path, meta=""):
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(values, origin="lower", extent=extent, cmap="viridis", aspect="equal")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title("normalized exp(-E) on grid", fontsize=9)
    _finish(fig, path, meta)


def kl_curve(rows, path, meta=""):
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot([r["iter"] for r in rows], [r["kl"] for r in rows], lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("smoothed KL(generated || data)")
    ax.grid(alpha=0.3)
    _finish(fig, path, meta)


def bounds_curves(rows, path, meta=""):
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    it = [r["iter"] for r in rows]
    ax.plot(it, [r["lower"] for r in rows], label="lower", lw=1)
    if any(np.isfinite(r.get("upper", np.nan)) for r in rows):
        ax.plot(it, [r["upper"] for r in rows], label="upper", lw=1)
    if "exact_nll" in rows[0]:
        ax.plot(it, [r["exact_nll"] for r in rows], "--", label="exact NLL", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("nats")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _finish(fig, path, meta)


def score_hist(in_scores, out_scores, path, meta=""):
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    bins = np.histogram_bin_edges(np.concatenate([in_scores, out_scores]), bins=60)
    ax.hist(in_scores, bins=bins, alpha=0.6, label="in-distribution", density=True)
    ax.hist(out_scores, bins=bins, alpha=0.6, label="out-of-distribution", density=True)
    ax.set_xlabel("score = -E(x)")
    ax.legend(fontsize=8)
    _finish(fig, path, meta)


def mode_bar(hist, path, meta=""):
    fig, ax = plt.subplots(figsize=(5.6, 3.0))
    ax.bar(np.arange(len(hist)), hist, width=0.85)
    ax.set_xlabel("mode index")
    ax.set_ylabel("assigned samples")
    _finish(fig, path, meta)
