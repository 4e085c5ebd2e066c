"""Figure rendering for the CLI report commands (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_density(rows, path, samples=None, disks=None, title="log-density of flow samples"):
    """Filled contours of (x, y, log p) grid rows; optional sample scatter and disk outlines."""
    rows = np.asarray(rows)
    xs, ys = np.unique(rows[:, 0]), np.unique(rows[:, 1])
    z = rows[:, 2].reshape(len(ys), len(xs))
    floor = np.max(z) - 12.0  # clip the far tails so contours stay readable
    fig, ax = plt.subplots(figsize=(5, 5))
    cs = ax.contourf(xs, ys, np.maximum(z, floor), levels=20, cmap="Blues")
    fig.colorbar(cs, ax=ax, shrink=0.8)
    if samples is not None:
        pts = np.asarray(samples)[:2000]
        ax.scatter(pts[:, 0], pts[:, 1], s=1, c="k", alpha=0.3)
    for cx, cy, r in disks or ():
        ax.add_patch(plt.Circle((cx, cy), r, fill=False, color="red", lw=1.5))
    ax.set_aspect("equal")
    ax.set_xlabel("a_x")
    ax.set_ylabel("a_y")
    ax.set_title(title)
    _save(fig, path)


def plot_visits(visits, walls, resolution, path, title="state visitation"):
    """Log-count heat map of a maze visitation histogram with walls overlaid."""
    visits = np.asarray(visits, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 5))
    h, w = walls.shape
    ax.imshow(np.log1p(visits), origin="upper", cmap="viridis", extent=(0, w, h, 0))
    ax.imshow(np.ma.masked_where(~walls, walls), origin="upper", cmap="Greys", vmin=0, vmax=1.3,
              extent=(0, w, h, 0))
    ax.set_title(f"{title} ({np.count_nonzero(visits)} bins, {resolution}/cell)")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    _save(fig, path)


def plot_metric(steps, values, path, ylabel, title=""):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, values, marker="o", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
