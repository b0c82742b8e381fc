"""Static figure rendering for the report stage (SVG files, no UI)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["equity_curves", "decile_curves"]


def equity_curves(curves: dict, path: str | Path) -> None:
    """Cumulative-return paths for the constructed portfolios."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for kind in sorted(curves):
        dates, cum = curves[kind]
        if len(dates) == 0:
            continue
        ax.plot(dates, cum, label=kind.upper(), linewidth=1.4)
    ax.set_xlabel("date")
    ax.set_ylabel("cumulative excess return")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def decile_curves(curves: dict, path: str | Path) -> None:
    """Cumulative excess return per prediction decile (1 = lowest)."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    cmap = plt.get_cmap("viridis")
    for k in sorted(curves):
        dates, cum = curves[k]
        if len(dates) == 0:
            continue
        ax.plot(dates, cum, label=f"D{k}", color=cmap((k - 1) / 9), linewidth=1.2)
    ax.set_xlabel("date")
    ax.set_ylabel("cumulative excess return")
    ax.legend(frameon=False, ncol=5, fontsize=8)
    ax.grid(alpha=0.3)
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
