"""Matplotlib figures rendered from the CSV outputs of the evaluate command."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_csv(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        try:
            out[k] = np.array([float(r[k]) for r in rows])
        except ValueError:
            out[k] = np.array([r[k] for r in rows])
    return out


def plot_rmse_curves(curves: dict, path, resonances=(), xlabel=r"$|\Delta|/\kappa$"):
    """One line per method; dashed lines show the method's predicted sigma if present."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (name, c) in enumerate(curves.items()):
        color = f"C{i}"
        ax.errorbar(c["center"], c["rmse"], yerr=c.get("stderr"), color=color, label=name, capsize=2)
        pred = c.get("predicted")
        if pred is not None and np.any(np.isfinite(pred)):
            ax.plot(c["center"], pred, "--", color=color)
    for r in resonances:
        ax.axvline(abs(r), color="0.7", lw=0.8, zorder=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("RMSE")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_one_to_one(estimates, truths, path, bins=50, lim=None):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    lim = lim or (min(np.min(truths), np.min(estimates)), max(np.max(truths), np.max(estimates)))
    ax.hist2d(truths, estimates, bins=bins, range=[lim, lim], cmap="Greys")
    ax.plot(lim, lim, "r-", lw=0.8)
    ax.set_xlabel("true value")
    ax.set_ylabel("estimate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_posteriors(grids: dict, path, truth=None):
    """Overlay one-parameter posteriors (name -> PosteriorGrid)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, g in grids.items():
        x = g.axes[0][1]
        ax.plot(x, g.weights.ravel(), label=name)
    if truth is not None:
        ax.axvline(truth, color="k", ls=":")
    ax.set_xlabel(grids[next(iter(grids))].names[0])
    ax.set_ylabel("posterior mass")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(hist: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(hist["epoch"], hist["train_loss"], label="train")
    ax.plot(hist["epoch"], hist["val_loss"], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_waiting_times(waits, path, density=None, bins=60):
    """Histogram of waiting times, optionally with a density curve ``(tau, w)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.ravel(waits), bins=bins, density=True, color="0.7")
    if density is not None:
        ax.plot(*density, "r-")
    ax.set_xlabel(r"waiting time $\kappa\tau$")
    ax.set_ylabel("density")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_report(results_dir, out_dir=None, resonances=()) -> list:
    """Render a figure for every recognised CSV in ``results_dir``.

    ``rmse_<method>.csv`` files are combined into one RMSE figure,
    ``history_*.csv`` become training curves and ``estimates_*.csv``
    (columns ``truth, estimate``) become one-to-one plots.
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir or results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    curves = {p.stem[len("rmse_"):]: read_csv(p) for p in sorted(results_dir.glob("rmse_*.csv"))}
    if curves:
        made.append(plot_rmse_curves(curves, out_dir / "rmse.png", resonances))
    for p in sorted(results_dir.glob("history_*.csv")):
        made.append(plot_training(read_csv(p), out_dir / f"{p.stem}.png"))
    for p in sorted(results_dir.glob("estimates_*.csv")):
        d = read_csv(p)
        made.append(plot_one_to_one(d["estimate"], d["truth"], out_dir / f"{p.stem}.png"))
    return made
