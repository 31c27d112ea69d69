"""Static SVG figures: toy mode placement, trajectory fans, sweep curves.

Every figure is written as SVG with a pinned hash salt and no embedded
date so the output bytes depend only on the plotted data. Agg is forced
before pyplot loads; nothing here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError
from .mixture import HierarchicalMixture, meta_mixture

__all__ = [
    "save_deterministic",
    "toy_mode_panels",
    "trajectory_figure",
    "similarity_heatmap",
    "sweep_chart",
]

# one shared cycle; meta-mode g uses _COLORS[g % len(_COLORS)]
_COLORS = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple",
           "tab:brown", "tab:pink", "tab:gray", "tab:olive", "tab:cyan"]


def save_deterministic(fig, path) -> None:
    """SVG bytes must be a pure function of the figure contents."""
    with plt.rc_context({"svg.hashsalt": "hmix"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _hier_points(h: HierarchicalMixture):
    """(n_meta, n_sub, 2) final positions plus (n_meta, n_sub) weights."""
    mus = h.mus.data
    if mus.ndim != 4:
        raise ContractError(f"expected an unbatched hierarchical forecast, got {mus.shape}")
    return mus[:, :, -1, :], h.weights.data


def toy_mode_panels(forecasts: dict, samples: dict, path) -> None:
    """One panel per inspected t value: sample scatter plus predicted modes.

    ``forecasts`` maps t -> HierarchicalMixture, ``samples`` maps t -> (n, 2)
    points drawn from the data distribution at that t. Modes share a color
    within a meta mode; marker area scales with mode weight.
    """
    ts = sorted(forecasts)
    if not ts:
        raise ContractError("toy_mode_panels: no forecasts")
    fig, axes = plt.subplots(1, len(ts), figsize=(4 * len(ts), 4), squeeze=False)
    for ax, t in zip(axes[0], ts):
        pts = np.asarray(samples[t])
        ax.scatter(pts[:, 0], pts[:, 1], s=4, c="0.8", linewidths=0, rasterized=False)
        ends, w = _hier_points(forecasts[t])
        for g in range(ends.shape[0]):
            ax.scatter(ends[g, :, 0], ends[g, :, 1],
                       s=40 + 400 * w[g], c=_COLORS[g % len(_COLORS)],
                       edgecolors="black", linewidths=0.5, zorder=3,
                       label=f"meta {g}")
        ax.axhline(0.0, color="0.6", lw=0.6)
        ax.axvline(0.0, color="0.6", lw=0.6)
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(-1.05, 1.05)
        ax.set_title(f"t = {t:g}")
        ax.set_aspect("equal")
    axes[0, 0].legend(loc="upper left", fontsize=8)
    save_deterministic(fig, path)


def trajectory_figure(h: HierarchicalMixture, path, past=None, truth=None) -> None:
    """Forecast fan for one scene: meta modes solid, sub modes dashed."""
    mus = h.mus.data
    if mus.ndim != 4:
        raise ContractError(f"expected an unbatched hierarchical forecast, got {mus.shape}")
    meta = meta_mixture(h).mus.data
    w = h.weights.data
    fig, ax = plt.subplots(figsize=(5, 5))
    if past is not None:
        past = np.asarray(past)
        ax.plot(past[:, 0], past[:, 1], color="black", lw=1.5, label="observed")
    for g in range(mus.shape[0]):
        c = _COLORS[g % len(_COLORS)]
        for k in range(mus.shape[1]):
            ax.plot(mus[g, k, :, 0], mus[g, k, :, 1], color=c, lw=0.8,
                    ls="--", alpha=0.4 + 0.6 * float(w[g, k]) / max(float(w.max()), 1e-12))
        ax.plot(meta[g, :, 0], meta[g, :, 1], color=c, lw=2.0, ls="-",
                label=f"meta {g}")
    if truth is not None:
        truth = np.asarray(truth)
        ax.plot(truth[:, 0], truth[:, 1], color="black", lw=1.5, ls=":", label="truth")
    ax.legend(fontsize=8)
    ax.set_aspect("equal")
    save_deterministic(fig, path)


def similarity_heatmap(mat: np.ndarray, sparsity: float, path) -> None:
    mat = np.asarray(mat)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(mat, vmin=0.0, vmax=1.0, cmap="viridis")
    fig.colorbar(im, ax=ax, label="co-membership rate")
    ax.set_xlabel("pooled mode")
    ax.set_ylabel("pooled mode")
    ax.set_title(f"mode similarity (sparsity {sparsity:.3f})")
    save_deterministic(fig, path)


def sweep_chart(rows: list[dict], x_key: str, metric: str, path,
                series_key: str | None = None) -> None:
    """Line chart of one metric against a swept hyperparameter.

    Rows are long-format dicts (one per grid cell per seed). Values are
    averaged over seeds; an optional second swept key becomes one line
    per value.
    """
    rows = [r for r in rows if metric in r]
    if not rows:
        raise ContractError(f"sweep_chart: no rows carry metric {metric!r}")

    def series_of(value):
        # rows may come back from a resumed CSV, so compare values as strings
        grouped: dict[float, list[float]] = {}
        for r in rows:
            if series_key is not None and str(r[series_key]) != value:
                continue
            grouped.setdefault(float(r[x_key]), []).append(float(r[metric]))
        xs = sorted(grouped)
        return xs, [float(np.mean(grouped[x])) for x in xs]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if series_key is None:
        xs, ys = series_of(None)
        ax.plot(xs, ys, marker="o", color=_COLORS[0])
    else:
        values = sorted({str(r[series_key]) for r in rows})
        for i, v in enumerate(values):
            xs, ys = series_of(v)
            ax.plot(xs, ys, marker="o", color=_COLORS[i % len(_COLORS)],
                    label=f"{series_key}={v}")
        ax.legend(fontsize=8)
    ax.set_xlabel(x_key)
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    save_deterministic(fig, path)
