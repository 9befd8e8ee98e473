"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dceac.utils import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "dceac",
}


def figure_path(path, suffix=".png"):
    """Sibling path with the data file's extension swapped for ``suffix``."""
    return os.path.splitext(path)[0] + suffix


def _save(fig, path):
    with atomic_write(path, "wb") as fh:
        fig.savefig(fh, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_confusion(cm, classes, path, title="Confusion matrix"):
    cm = np.asarray(cm)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(len(classes)), classes)
        ax.set_yticks(range(len(classes)), classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        thresh = cm.max() / 2 if cm.size else 0
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if cm[i, j] > thresh else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        _save(fig, path)


def plot_train_log(train_log, path, title="Training losses"):
    epochs = train_log.column("epoch")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for name, style in (("L", "-"), ("L_r", "--"), ("L_c", ":")):
            vals = train_log.column(name)
            if any(v is not None for v in vals):
                ax.plot(epochs, [np.nan if v is None else v for v in vals], style, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        churn = train_log.column("labels_changed_frac")
        if any(v is not None for v in churn):
            ax2 = ax.twinx()
            ax2.plot(epochs, [np.nan if v is None else v for v in churn], color="grey", lw=0.8)
            ax2.set_ylabel("labels changed")
        fig.tight_layout()
        _save(fig, path)
