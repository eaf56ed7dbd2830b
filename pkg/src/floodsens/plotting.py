"""Figures written next to the delimited outputs (PNG maps, SVG line plots)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import BoundaryNorm, ListedColormap  # noqa: E402

FACTOR_COLORS = {"S": "#1b9e77", "R": "#d95f02", "E": "#7570b3"}


def _extent(header):
    return (header.xll, header.xmax, header.yll, header.ytop)


def save_map(raster, path, title="", cmap="viridis", vmin=None, vmax=None, label="", clamp=None):
    """Raster as an image; nodata is left blank.  ``clamp`` limits display values only."""
    vals = raster.filled(np.nan)
    if clamp is not None:
        vals = np.clip(vals, *clamp)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(vals, extent=_extent(raster.header), cmap=cmap, vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    fig.colorbar(im, ax=ax, label=label)
    ax.set_title(title)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_argmax_map(raster, path, title="Highest-ranked factor"):
    vals = raster.filled(np.nan)
    cmap = ListedColormap([FACTOR_COLORS[f] for f in ("S", "R", "E")])
    norm = BoundaryNorm([0.5, 1.5, 2.5, 3.5], cmap.N)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(vals, extent=_extent(raster.header), cmap=cmap, norm=norm, interpolation="nearest")
    cb = fig.colorbar(im, ax=ax, ticks=[1, 2, 3])
    cb.ax.set_yticklabels(["S", "R", "E"])
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_histogram(edges, counts, path, xlabel="", title=""):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="0.4", edgecolor="white")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_si_histograms(histograms, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for f, (edges, counts) in histograms.items():
        centres = 0.5 * (edges[:-1] + edges[1:])
        ax.plot(centres, counts, drawstyle="steps-mid", color=FACTOR_COLORS[f], label=f"Si({f})")
    ax.set_xlabel("first-order index")
    ax.set_ylabel("cells")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_convergence(n, mean, var, path, title=""):
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a1.plot(n, mean, color="k", lw=1)
    a1.set_ylabel("running mean (m)")
    a2.plot(n, var, color="0.4", lw=1)
    a2.set_ylabel("running variance (m$^2$)")
    a2.set_xlabel("N")
    a1.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_si_convergence(n, si, path, title=""):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, f in enumerate(("S", "R", "E")):
        ax.plot(n, si[:, k], color=FACTOR_COLORS[f], label=f"Si({f})")
    ax.set_xlabel("N")
    ax.set_ylabel("first-order index")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
