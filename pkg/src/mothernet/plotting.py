"""Figures written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ShapeError  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mothernet",
    "svg.fonttype": "none",
}


def boundary_grid(model, X, resolution=200, pad=0.5):
    """Class-0 probability of ``model`` on a grid over the bounding box of ``X`` +- ``pad``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ShapeError(f"decision boundaries need exactly 2 features, got {X.shape[-1]}")
    lo = X.min(axis=0) - pad
    hi = X.max(axis=0) + pad
    gx = np.linspace(lo[0], hi[0], resolution)
    gy = np.linspace(lo[1], hi[1], resolution)
    xx, yy = np.meshgrid(gx, gy)
    points = np.column_stack([xx.ravel(), yy.ravel()])
    p0 = model.predict_proba(points)[:, 0].reshape(xx.shape)
    return xx, yy, p0


def plot_boundary(model, ds, path, resolution=200, pad=0.5, title=None):
    """Gray-scale heatmap of P(class 0) with the data scattered on top; returns the grid."""
    xx, yy, p0 = boundary_grid(model, ds.X, resolution, pad)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(p0, origin="lower", extent=(xx.min(), xx.max(), yy.min(), yy.max()), cmap="gray",
                  vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
        if ds.y is not None:
            markers = "os^vD<>p*h"
            for k in np.unique(ds.y):
                sel = ds.y == k
                ax.scatter(ds.X[sel, 0], ds.X[sel, 1], s=10, marker=markers[k % len(markers)],
                           edgecolors="k", linewidths=0.4, label=f"class {k}")
            ax.legend(loc="upper right", frameon=False)
        ax.set_xlabel(ds.feature_names[0])
        ax.set_ylabel(ds.feature_names[1])
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return xx, yy, p0


def plot_auc_vs_time(summary, path):
    """Normalized AUC against mean fit + predict time, one point per algorithm."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        t = summary["fit_plus_predict_s"].clip(lower=1e-6)
        ax.scatter(t, summary["normalized_auc"], s=18, color="k")
        for name, ti, ai in zip(summary.index, t, summary["normalized_auc"]):
            ax.annotate(name, (ti, ai), textcoords="offset points", xytext=(4, 2), fontsize=7)
        ax.set_xscale("log")
        ax.set_xlabel("fit + predict time (s)")
        ax.set_ylabel("mean normalized ROC AUC")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)


def plot_training_curve(records, path, window=100):
    losses = np.array([r["loss"] for r in records])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(losses, color="0.75", lw=0.5)
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(losses)), smooth, color="k", lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("test-row cross-entropy")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)
