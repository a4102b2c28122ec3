"""Matplotlib figures for the report path (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=8)


def plot_comparison(table: dict, path, title: str = "Mean metric gain (95% CI)") -> None:
    """Grouped bars, one group per variant and one bar per dataset, CI as error bars."""
    rows, cols = table["rows"], table["columns"]
    width = 0.8 / max(len(cols), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(rows) + 2), 4))
    x = np.arange(len(rows))
    for j, col in enumerate(cols):
        means = [table["cells"].get(r, {}).get(col, {}).get("mean", np.nan) for r in rows]
        cis = [table["cells"].get(r, {}).get(col, {}).get("ci95", 0.0) for r in rows]
        ax.bar(x + (j - (len(cols) - 1) / 2) * width, means, width, yerr=cis, capsize=2, label=col)
    ax.set_xticks(x)
    ax.set_xticklabels(rows, rotation=30, ha="right")
    ax.set_ylabel("metric gain")
    ax.set_title(title, fontsize=10)
    ax.axhline(0, color="k", lw=0.5)
    if len(cols) > 1:
        ax.legend(fontsize=8, frameon=False)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_train_log(rows: list, path, title: str = "") -> None:
    """Loss terms per iteration (left) and validation gain (right)."""
    it = [r["iter"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    a1.plot(it, [r["attack"] for r in rows], label="attack")
    a1.plot(it, [r["total"] for r in rows], label="total", alpha=0.7)
    a1.set_xlabel("iteration")
    a1.legend(fontsize=8, frameon=False)
    val = [(r["iter"], r["val_gain"]) for r in rows if r.get("val_gain") is not None]
    if val:
        a2.plot(*zip(*val), marker="o", ms=3)
    a2.set_xlabel("iteration")
    a2.set_ylabel("validation gain")
    for ax in (a1, a2):
        _style(ax)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_patches(patches: dict, path) -> None:
    """Side-by-side thumbnails of trained patches."""
    n = len(patches)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 2.0), squeeze=False)
    for ax, (name, p) in zip(axes[0], patches.items()):
        ax.imshow(np.transpose(p.pixels, (1, 2, 0)), interpolation="nearest")
        ax.set_title(name, fontsize=6)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_distance_curve(curve: dict, path, title: str = "Wallpaper gain vs distance") -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(curve)
    ax.plot(range(len(names)), [curve[k] for k in names], marker="o")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel("metric gain")
    ax.set_title(title, fontsize=10)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
