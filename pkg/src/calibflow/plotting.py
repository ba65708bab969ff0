"""SVG figures for the CLI reports (matplotlib, Agg backend).

Plots are conveniences; the CSV and JSON files written next to them are the
record.  Output is deterministic: the SVG id salt is fixed and the date
metadata dropped, so identical inputs give identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "calibflow",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

NODE_COLORS = ("tab:orange", "magenta", "tab:cyan")
OVER, UNDER = "#f4c2d7", "#c2d7f4"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def reliability_diagram(curve, path, title: str = "") -> Path:
    """Per-keypoint calibration curves (thin), their median (thick), identity (dashed)."""
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    q = np.asarray(curve.quantiles)
    for row in np.asarray(curve.per_keypoint):
        ax.plot(q, row, color="0.7", lw=0.6)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8, label="ideal")
    ax.plot(q, curve.median, color="tab:blue", lw=1.8, label=f"median, ECE={curve.ece:.3f}")
    ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="quantile q", ylabel="observed frequency", title=title)
    ax.set_aspect("equal")
    ax.legend(loc="upper left", frameon=False, fontsize=7)
    return _save(fig, path)


def sigma_grid(dims, hyps, table, true_sigma: float, path) -> Path:
    """Fitted sigma against the number of hypotheses, one line per dimension."""
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    hyps = np.asarray(hyps, dtype=float)
    top = max(float(np.nanmax(table)) * 1.1, true_sigma * 1.5)
    ax.axhspan(0, true_sigma, color=OVER, alpha=0.5, lw=0, label="overconfident")
    ax.axhspan(true_sigma, top, color=UNDER, alpha=0.5, lw=0, label="underconfident")
    cmap = plt.get_cmap("viridis")
    for i, d in enumerate(dims):
        ax.plot(hyps, table[i], "o-", ms=3, color=cmap(i / max(len(dims) - 1, 1)), label=f"D={d}")
    ax.axhline(true_sigma, color="k", lw=0.8)
    ax.set(xscale="log", ylim=(0, top), xlabel="hypotheses N", ylabel="fitted sigma")
    ax.legend(fontsize=6, frameon=False, ncol=2)
    return _save(fig, path)


def loss_curve(x, y, path, xlabel: str, ylabel: str, marks=()) -> Path:
    fig, ax = plt.subplots(figsize=(3.8, 3.0))
    ax.plot(x, y, "o-", ms=3)
    for v in marks:
        ax.axvline(v, color="k", ls=":", lw=0.8)
    ax.set(xlabel=xlabel, ylabel=ylabel)
    return _save(fig, path)


def mean_convergence(results, path) -> Path:
    """Expected winning z against the mean offset; zero crossing is the optimum."""
    fig, ax = plt.subplots(figsize=(3.8, 3.0))
    for r in results:
        ax.plot(r.offsets, r.ez, "o-", ms=3, label=f"{r.dist}, N={r.N}")
    ax.axhline(0, color="k", lw=0.6)
    ax.axvline(0, color="k", lw=0.6, ls=":")
    ax.set(xlabel="mu - E[x]", ylabel="E[z of winner]")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def landscape(surface, path, constrained=None) -> Path:
    """minMPJPE and ECE heat maps over (mu, sigma) with the ECE-minimising manifold."""
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4))
    mu, sg = surface.mu_grid, surface.sigma_grid
    extent = (sg[0], sg[-1], mu[0], mu[-1])
    for ax, field, name in ((axes[0], surface.min_mpjpe, "minMPJPE"), (axes[1], surface.ece, "ECE")):
        im = ax.imshow(field, origin="lower", aspect="auto", extent=extent, cmap="magma_r")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.plot(surface.ece_manifold(), mu, color="w", lw=1.0, label="ECE argmin")
        ax.plot([surface.true_sigma], [surface.true_mu], "*", color="gold", ms=13, mec="k",
                label="true parameters")
        s_mm = surface.argmin_min_mpjpe()
        ax.plot([s_mm[1]], [s_mm[0]], "x", color="tab:cyan", ms=8, label="minMPJPE argmin")
        if constrained is not None:
            ax.plot([constrained[1]], [constrained[0]], "o", mfc="none", mec="lime", ms=9,
                    label="ECE-constrained")
        ax.set(xlabel="sigma", ylabel="mu", title=name)
    axes[1].legend(fontsize=6, loc="lower right")
    return _save(fig, path)


def pendulum_samples(scatter: dict, truth: np.ndarray, path) -> Path:
    """Sampled node positions per model (columns) for a few test frames (rows)."""
    models = list(scatter)
    n = truth.shape[0]
    fig, axes = plt.subplots(n, len(models), figsize=(2.2 * len(models), 2.2 * n), squeeze=False)
    for j, m in enumerate(models):
        for i in range(n):
            ax = axes[i, j]
            for k, col in enumerate(NODE_COLORS):
                ax.scatter(scatter[m][:, i, k, 0], scatter[m][:, i, k, 1], s=2, color=col, alpha=0.35,
                           lw=0)
            chain = np.vstack([[0.0, 0.0], truth[i]])
            ax.plot(chain[:, 0], chain[:, 1], "k-o", ms=2.5, lw=0.8)
            ax.set(xlim=(-3.2, 3.2), ylim=(-3.2, 3.2), xticks=[], yticks=[])
            for side in ("top", "right"):
                ax.spines[side].set_visible(True)
            ax.set_aspect("equal")
            if i == 0:
                ax.set_title(m)
    return _save(fig, path)


def training_curves(logs: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    for m, log in logs.items():
        ep = [r["epoch"] for r in log.epochs]
        ax.plot(ep, [r["train_loss"] for r in log.epochs], lw=1, label=f"{m} train")
        ax.plot(ep, [r["val_nll"] for r in log.epochs], lw=1, ls="--", label=f"{m} val NLL")
    vals = np.concatenate([[r["val_nll"] for r in l.epochs] for l in logs.values()])
    lo = float(np.min(vals))
    ax.set(xlabel="epoch", ylabel="loss", ylim=(lo - 1, lo + 15))
    ax.legend(fontsize=6, frameon=False)
    return _save(fig, path)


def baseline_bars(report: dict, path) -> Path:
    """Per-dimension sigma and the two test metrics for the NLL and minMPJPE fits."""
    fig, axes = plt.subplots(1, 3, figsize=(8.4, 2.8))
    s_nll = np.asarray(report["nll"]["sigma"])
    s_mm = np.asarray(report["min_mpjpe"]["sigma"])
    idx = np.arange(len(s_nll))
    axes[0].bar(idx - 0.2, s_nll, 0.4, label="NLL")
    axes[0].bar(idx + 0.2, s_mm, 0.4, label="minMPJPE")
    axes[0].set(xlabel="output dimension", ylabel="sigma")
    axes[0].legend(fontsize=7, frameon=False)
    for ax, key in ((axes[1], "ece"), (axes[2], "min_mpjpe")):
        ax.bar([0, 1], [report["nll"][key], report["min_mpjpe"][key]], color=["tab:blue", "tab:orange"])
        ax.set(xticks=[0, 1], xticklabels=["NLL", "minMPJPE"], title=key)
    return _save(fig, path)
