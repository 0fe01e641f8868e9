"""Report figures: winner counts per summarizer pool and highlight P/R/F1."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

report_rc = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "riskevidence",
}

# PNG metadata would otherwise embed the matplotlib version
_METADATA = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def winner_counts_figure(tallies: dict[str, dict[str, int]], path: str | Path) -> Path:
    """Grouped bars: one group per pool, one bar per summarizer, labelled with counts."""
    with plt.rc_context(report_rc):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        pools = list(tallies)
        names = sorted({n for t in tallies.values() for n in t})
        width = 0.8 / max(1, len(names))
        for j, name in enumerate(names):
            xs = [i + (j - (len(names) - 1) / 2) * width for i in range(len(pools))]
            ys = [tallies[p].get(name, 0) for p in pools]
            bars = ax.bar(xs, ys, width=width, label=name)
            ax.bar_label(bars, padding=1, fontsize=7)
        ax.set_xticks(range(len(pools)))
        ax.set_xticklabels(pools)
        ax.set_ylabel("winner count")
        ax.set_title("Selected summaries by summarizer")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def highlight_prf_figure(rows, path: str | Path) -> Path:
    with plt.rc_context(report_rc):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        metrics = ("Pre.", "Rec.", "F1")
        width = 0.8 / max(1, len(rows))
        for j, (label, *values) in enumerate(rows):
            xs = [i + (j - (len(rows) - 1) / 2) * width for i in range(len(metrics))]
            ax.bar(xs, values, width=width, label=label)
        ax.set_xticks(range(len(metrics)))
        ax.set_xticklabels(metrics)
        ax.set_ylim(0, 1.05)
        ax.set_title("Highlight similarity")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
