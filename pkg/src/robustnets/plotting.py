"""PNG figures rendered from the experiment CSVs."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import read_csv  # noqa: E402


def _columns(path):
    header, rows = read_csv(path)
    return {name: rows[:, i] for i, name in enumerate(header)}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _png(csv_path):
    return os.path.splitext(csv_path)[0] + ".png"


def plot_contraction(csv_path):
    c = _columns(csv_path)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax1.plot(c["t"], c["y_a"], label="run a")
    ax1.plot(c["t"], c["y_b"], "--", label="run b")
    ax1.set_ylabel("output")
    ax1.legend()
    gap = np.where(c["gap"] > 0, c["gap"], np.nan)
    ax2.semilogy(c["t"], gap)
    ax2.set_xlabel("time step")
    ax2.set_ylabel("state gap (P-norm)")
    return _save(fig, _png(csv_path))


def plot_mnist(csv_path):
    c = _columns(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(c["epsilon"], 100 * c["lbdn_acc"], "o-", label="LBDN")
    ax.plot(c["epsilon"], 100 * c["dense_acc"], "s-", label="dense")
    ax.set_xlabel("noise magnitude")
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    return _save(fig, _png(csv_path))


def _per_batch(c, key):
    batches = np.unique(c["batch"]).astype(int)
    for b in batches:
        sel = c["batch"] == b
        yield c["t"][sel], c[key][sel]


def plot_rl(csv_path, loss_csv=None):
    c = _columns(csv_path)
    n = 4 if loss_csv else 3
    fig, axes = plt.subplots(n, 1, figsize=(6, 2.2 * n))
    for ax, key, label in zip(axes, ("q", "qdot", "u"), ("position", "velocity", "force")):
        for t, v in _per_batch(c, key):
            ax.plot(t, v, lw=0.6, color="tab:blue", alpha=0.5)
        ax.set_ylabel(label)
    axes[2].set_xlabel("time (s)")
    if loss_csv:
        loss = _columns(loss_csv)
        axes[3].semilogy(loss["epoch"], loss["mean_loss"])
        axes[3].set_xlabel("epoch")
        axes[3].set_ylabel("cost")
    return _save(fig, _png(csv_path))


def plot_bench(csv_path):
    c = _columns(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(c["n"], c["t_cached"], "o-", label="construct once per loss")
    ax.loglog(c["n"], c["t_rebuild"], "s-", label="construct every call")
    ax.set_xlabel("hidden width")
    ax.set_ylabel("training time (s)")
    ax.legend()
    return _save(fig, _png(csv_path))


def plot_observer(csv_path):
    c = _columns(csv_path)
    fig, axes = plt.subplots(2, 2, figsize=(8, 5), sharex=True)
    for row, (true, est) in enumerate((("q", "qhat"), ("qdot", "qdothat"))):
        for (t, x), (_, xh) in zip(_per_batch(c, true), _per_batch(c, est)):
            axes[row, 0].plot(t, x, color="0.6", lw=0.6)
            axes[row, 0].plot(t, xh, color="tab:red", lw=0.6)
            axes[row, 1].plot(t, x - xh, color="tab:blue", lw=0.6)
        axes[row, 0].set_ylabel(true)
        axes[row, 1].set_ylabel(f"{true} error")
    axes[1, 0].set_xlabel("time (s)")
    axes[1, 1].set_xlabel("time (s)")
    return _save(fig, _png(csv_path))
