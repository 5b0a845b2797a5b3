"""Static SVG figures. Fixed hash salt and no date metadata keep reruns reproducible."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "eosfm"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def bar_plot(labels, values, ylabel, path):
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(labels) + 2), 4))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    _save(fig, path)


def line_plot(xs, ys, xlabel, ylabel, path, scatter=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if scatter is not None:
        ax.scatter(*scatter, s=10, color="grey", alpha=0.6)
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    _save(fig, path)
