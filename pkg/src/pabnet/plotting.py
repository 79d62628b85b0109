"""Figures rendered next to the metric tables."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.8),
    "font.size": 12,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.6,
}
GENUINE_COLOR = "#2e86c1"
IMPOSTOR_COLOR = "#c0392b"
# no Software/date entries, so reruns give identical files
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def plot_histogram(edges, genuine, impostor, path, title="Similarity distributions"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = np.diff(edges)
        ax.bar(centers, genuine, width=width, alpha=0.55, color=GENUINE_COLOR, label="genuine")
        ax.bar(centers, impostor, width=width, alpha=0.55, color=IMPOSTOR_COLOR, label="impostor")
        ax.set_xlabel("score")
        ax.set_ylabel("fraction of pairs")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_roc(roc, path, title="Verification ROC"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        far = np.clip(roc.far, 1e-4, 1.0)
        ax.step(far, roc.gar, where="post", color=GENUINE_COLOR)
        ax.set_xscale("log")
        ax.set_xlim(1e-4, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("false accept rate")
        ax.set_ylabel("genuine accept rate")
        ax.set_title(title)
        _save(fig, path)


def plot_cmc(accuracy, path, title="CMC"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ranks = np.arange(1, len(accuracy) + 1)
        ax.plot(ranks, accuracy, marker="o", color=GENUINE_COLOR)
        ax.set_xticks(ranks)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("rank")
        ax.set_ylabel("identification rate")
        ax.set_title(title)
        _save(fig, path)


def plot_bucket_rank1(rows, path, title="Rank-1 by yaw"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"±{b}°" for b, _, _ in rows]
        values = [0.0 if np.isnan(r) else r for _, _, r in rows]
        ax.bar(labels, values, color=GENUINE_COLOR)
        ax.set_ylim(0.0, 1.02)
        ax.set_ylabel("rank-1 rate")
        ax.set_title(title)
        _save(fig, path)


def plot_loss(losses, path, window=50, title="Training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, color="#95a5a6", linewidth=0.8, label="per step")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, color=GENUINE_COLOR, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)
