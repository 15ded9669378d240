"""Figure rendering for the report commands (non-interactive Agg backend)."""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def plot_kl_trace(rows, path, title: str = "") -> None:
    """Mean KL and mean reconstruction per time step; ``rows`` as returned by diagnose."""
    rows = np.asarray(rows, dtype=float)
    t = rows[:, 0]
    fig = Figure(figsize=(7, 5))
    ax_kl, ax_rec = fig.subplots(2, 1, sharex=True)
    ax_kl.plot(t, rows[:, 1], color="tab:red", lw=1.2)
    ax_kl.set_ylabel("mean KL (nats)")
    ax_rec.plot(t, rows[:, 2], color="tab:blue", lw=1.2)
    ax_rec.set_ylabel("mean log p(x|z,d)")
    ax_rec.set_xlabel("time step")
    for ax in (ax_kl, ax_rec):
        ax.grid(alpha=0.3)
    if title:
        ax_kl.set_title(title)
    _save(fig, path)


def plot_training_curve(rows, path) -> None:
    """ELBO per step against update index, train and validation rows, with beta."""
    train = [r for r in rows if r["kind"] == "train"]
    valid = [r for r in rows if r["kind"] == "valid"]
    fig = Figure(figsize=(7, 4))
    ax = fig.subplots()
    if train:
        ax.plot([r["update"] for r in train], [r["train_elbo_per_step"] for r in train],
                lw=0.8, alpha=0.7, label="train (annealed)")
    if valid:
        ax.plot([r["update"] for r in valid], [r["train_elbo_per_step"] for r in valid],
                "o-", ms=3, label="valid (beta = 1)")
    ax.set_xlabel("update")
    ax.set_ylabel("ELBO per step")
    ax.grid(alpha=0.3)
    if train:
        ax2 = ax.twinx()
        ax2.plot([r["update"] for r in train], [r["beta"] for r in train], color="gray", lw=0.8, ls="--")
        ax2.set_ylabel("beta")
        ax2.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    _save(fig, path)
