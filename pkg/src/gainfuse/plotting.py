"""Report figures, rendered off-screen with the Agg canvas."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    fig = Figure(figsize=(width, height or width * GOLDEN), dpi=100)
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    for ax in axes:
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    return fig, axes


def _save(fig: Figure, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png")


def plot_dig_trace(timesteps: Sequence[int], gains: np.ndarray, weights: np.ndarray,
                   names: Sequence[str], path: str | Path) -> None:
    """Cumulative gain and applied weight per modality along one chain.

    Patch arrays are reduced to their sums (gains) and means (weights).
    """
    g = np.asarray(gains, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.ndim > 2:
        g = g.reshape(g.shape[0], g.shape[1], -1).sum(axis=2)
        w = w.reshape(w.shape[0], w.shape[1], -1).mean(axis=2)
    t = np.asarray(timesteps)
    fig, (ax0, ax1) = _figure(9.0, 3.4, ncols=2)
    for k, name in enumerate(names):
        ax0.plot(t, np.cumsum(g[:, k]), marker="o", ms=3, label=name)
        ax1.step(t, w[:, k], where="post", label=name)
    for ax in (ax0, ax1):
        ax.invert_xaxis()
        ax.set_xlabel("timestep t")
    ax0.set_ylabel("cumulative DIG")
    ax1.set_ylabel("mean weight")
    ax1.set_ylim(0, 1)
    ax0.legend(frameon=False)
    _save(fig, path)


def plot_dig_bands(timesteps: Sequence[int], mean_cum: np.ndarray, var_cum: np.ndarray,
                   labels: Sequence[str], path: str | Path) -> None:
    """Mean cumulative gain with a one-standard-deviation band per curve."""
    t = np.asarray(timesteps)
    fig, (ax,) = _figure()
    for i, label in enumerate(labels):
        m, sd = mean_cum[:, i], np.sqrt(np.maximum(var_cum[:, i], 0.0))
        (line,) = ax.plot(t, m, label=label)
        ax.fill_between(t, m - sd, m + sd, color=line.get_color(), alpha=0.25, lw=0)
    ax.invert_xaxis()
    ax.set_xlabel("timestep t")
    ax.set_ylabel("cumulative DIG")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_mechanism(cov_sum: np.ndarray, mean_gerror: np.ndarray, names: Sequence[str],
                   rho: float, path: str | Path, highlight: Sequence[str] = ("dynamic", "static_equal", "anti_dig")) -> None:
    fig, (ax,) = _figure()
    ax.scatter(cov_sum, mean_gerror, s=14, color="0.5")
    for name in highlight:
        if name in names:
            i = list(names).index(name)
            ax.scatter(cov_sum[i], mean_gerror[i], s=30)
            ax.annotate(name, (cov_sum[i], mean_gerror[i]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel(r"$\sum_t A(t)\sum_k \mathrm{Cov}(w_k, B_k)$")
    ax.set_ylabel("mean GError")
    ax.set_title(f"Spearman rho = {rho:.3f}", fontsize=10)
    _save(fig, path)


def plot_sweep(values: Sequence, means: Sequence[float], errors: Sequence[float], xlabel: str,
               path: str | Path, baseline: float | None = None) -> None:
    fig, (ax,) = _figure()
    x = np.arange(len(values))
    ax.errorbar(x, means, yerr=errors, marker="o", capsize=3)
    if baseline is not None:
        ax.axhline(baseline, color="0.4", ls="--", lw=1, label="static_equal")
        ax.legend(frameon=False)
    ax.set_xticks(x, [str(v) for v in values])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean GError")
    _save(fig, path)
