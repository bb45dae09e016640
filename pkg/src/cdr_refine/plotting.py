"""Figures written next to the CSV outputs of train, eval and sweep."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 120,
}
GOLDEN = (5 ** 0.5 - 1) / 2


def _figure(width=4.5):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(history, path):
    fig, ax = _figure()
    epochs = [row["epoch"] for row in history]
    ax.plot(epochs, [row["train_total"] for row in history], label="train")
    ax.plot(epochs, [row["val_total"] for row in history], label="validation", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def plot_length_table(table, path, reference=None):
    """Bars of mean H3 RMSD per loop length; ``reference`` overlays another method's values."""
    fig, ax = _figure()
    lengths = sorted(table)
    ax.bar([str(n) for n in lengths], [table[n] for n in lengths], color="0.35", label="this model")
    if reference:
        keys = [n for n in lengths if n in reference]
        ax.plot([str(n) for n in keys], [reference[n] for n in keys], "o", color="C3", label="reference")
        ax.legend()
    ax.set_xlabel("H3 loop length")
    ax.set_ylabel("mean CA RMSD (Å)")
    return _save(fig, path)


def plot_loop_means(means, path):
    fig, ax = _figure(3.2)
    loops = list(means)
    ax.bar([l.upper() for l in loops], [means[l] for l in loops], color=["C0", "C1", "C2"][: len(loops)])
    ax.set_ylabel("mean CA RMSD (Å)")
    return _save(fig, path)


def plot_sweep(rows, param, path):
    fig, ax = _figure()
    xs = [row[param] for row in rows]
    ax.plot(xs, [row["h3_rmsd"] for row in rows], marker="o", color="k")
    ax.set_xticks(xs)
    ax.set_xlabel({"z": "kernel size z", "q": "convolutional layers q"}.get(param, param))
    ax.set_ylabel("mean H3 RMSD (Å)")
    return _save(fig, path)
