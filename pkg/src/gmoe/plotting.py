"""Matplotlib rendering of sweep summaries."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import RateFit, SummaryRow

__all__ = ["render_rate_svg", "save_rate_plot"]


def render_rate_svg(
    summaries: tuple[SummaryRow, ...],
    rate: RateFit | None = None,
    title: str = "",
) -> str:
    """Log-log mean-loss figure with error bars and the fitted dashed line.

    Returns the SVG text; date metadata is stripped so repeated runs produce
    stable output.
    """
    plt.rcParams["svg.hashsalt"] = "gmoe"
    rows = [row for row in summaries if row.count > 0 and np.isfinite(row.mean_loss)]
    ns = np.array([row.n for row in rows], dtype=float)
    means = np.array([row.mean_loss for row in rows], dtype=float)
    errs = np.array([row.stderr for row in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    ax.errorbar(
        ns, means, yerr=errs,
        color="tab:orange", marker="o", markersize=3.5, linewidth=1.3,
        capsize=2.5, label="empirical mean loss",
    )
    if rate is not None and ns.size:
        xs = np.geomspace(ns.min(), ns.max(), 64)
        ax.plot(
            xs, np.exp(rate.intercept) * xs**rate.slope,
            linestyle="-.", color="black", linewidth=1.2,
            label=f"least-squares fit, slope {rate.slope:.3f}",
        )
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sample size n")
    ax.set_ylabel("mean loss")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.25)
    ax.legend()
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def save_rate_plot(path, summaries, rate=None, title: str = "") -> None:
    with open(path, "w") as handle:
        handle.write(render_rate_svg(summaries, rate, title))
