"""Static figures written to files (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curves(rows, path, title=None):
    it = np.array([r["iteration"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("train_loss", "train loss"), ("lrf_loss", "LRF loss")):
        vals = np.array([np.nan if r.get(key) is None else r[key] for r in rows], dtype=float)
        if np.any(np.isfinite(vals)):
            ax.semilogy(it, np.where(vals > 0, vals, np.nan), label=label)
    ax.set_xlabel("iteration")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def predictions(times, observed, predicted, path, title=None):
    """Observations as dots, model output as lines; one panel per observed dimension."""
    observed = np.asarray(observed).reshape(len(times), -1)
    predicted = np.asarray(predicted).reshape(len(times), -1)
    n = observed.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.5 * n), squeeze=False)
    for i, ax in enumerate(axes[:, 0]):
        ax.plot(times, observed[:, i], ".", ms=3, color="0.5", label="data")
        ax.plot(times, predicted[:, i], "-", lw=1.2, label="model")
        ax.set_ylabel(f"y{i + 1}")
    axes[0, 0].legend(loc="upper right")
    axes[-1, 0].set_xlabel("t")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def state_norms(times, norms, path, title=None):
    """|x(t)| for several closed-loop trajectories (log scale)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for row in np.atleast_2d(norms):
        ax.semilogy(times, row, lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("|x(t)|")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
