"""Heatmaps and comparison figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed 256-entry lookup table (viridis), rows are RGB in [0, 1]
COLORMAP = np.asarray(matplotlib.colormaps["viridis"](np.arange(256))[:, :3], dtype=np.float64)
MID_INDEX = 128


def heatmap_indices(values: np.ndarray) -> np.ndarray:
    """Colormap index per pixel, normalized to the map's own [min, max]."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[2] == 1:
        v = v[:, :, 0]
    if v.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, MID_INDEX, dtype=np.intp)
    idx = np.floor((v - lo) / (hi - lo) * 255.0 + 0.5)
    return np.clip(idx, 0, 255).astype(np.intp)


def render_heatmap(values: np.ndarray) -> np.ndarray:
    """RGB image ``(H, W, 3)`` of a weight or loss map."""
    return COLORMAP[heatmap_indices(values)]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def strategy_figure(labels: Sequence[str], means: Sequence[float], ses: Sequence[float], path,
                    title: str = "mean fusion loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    pos = np.arange(len(labels))
    ax.bar(pos, means, yerr=[2 * s for s in ses], color=COLORMAP[np.linspace(40, 220, len(labels)).astype(int)],
           capsize=4)
    ax.set_xticks(pos, labels, rotation=30, ha="right")
    lo = min(m - 2 * s for m, s in zip(means, ses))
    hi = max(m + 2 * s for m, s in zip(means, ses))
    pad = 0.1 * (hi - lo) if hi > lo else 0.01 * max(abs(hi), 1e-12)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_ylabel("loss (error bars: 2 SE)")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def covariance_figure(labels: Sequence[str], covs: Sequence[Sequence[float]], path) -> Path:
    """Grouped bars of pooled Cov(w_m, l_m) per strategy and source."""
    covs = np.asarray(covs, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n_src = covs.shape[1]
    width = 0.8 / n_src
    pos = np.arange(len(labels))
    for m in range(n_src):
        ax.bar(pos + (m - (n_src - 1) / 2) * width, covs[:, m], width, label=f"source {m}",
               color=COLORMAP[int(40 + 180 * m / max(n_src - 1, 1))])
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(pos, labels)
    ax.set_ylabel("pooled Cov(w, l)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
