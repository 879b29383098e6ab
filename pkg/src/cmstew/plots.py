"""Figures written next to the CSV / JSON-lines outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "axes": dict(labelsize=9, titlesize=9, linewidth=0.6),
    "figure": dict(dpi=100, facecolor="white"),
    "legend": dict(fontsize=8, frameon=False),
    "lines": dict(linewidth=1.2),
    "xtick": dict(labelsize=8),
    "ytick": dict(labelsize=8),
    "savefig": dict(dpi=120),
}


def _styled(figsize=(6.0, 3.6)):
    for key, val in STYLE.items():
        matplotlib.rc(key, **val)
    return plt.subplots(figsize=figsize)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def learning_curves(history: list[dict], metric: str, path, title: str = "") -> Path:
    """Train/dev total loss on the left axis, dev selection metric on the right."""
    fig, ax = _styled()
    for split, style in (("train", "-"), ("dev", "--")):
        rows = [r for r in history if r["split"] == split and r.get("loss_total") is not None]
        if rows:
            ax.plot([r["epoch"] for r in rows], [r["loss_total"] for r in rows], style,
                    color="tab:blue", label=f"{split} loss")
    ax.set_xlabel("epoch")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("loss")
    dev = [r for r in history if r["split"] == "dev" and r.get(metric) is not None]
    if dev:
        ax2 = ax.twinx()
        ax2.plot([r["epoch"] for r in dev], [r[metric] for r in dev], color="tab:red",
                 label=f"dev {metric}")
        ax2.set_ylabel(metric)
        ax2.legend(loc="upper right")
    ax.legend(loc="upper left")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def bar_chart(labels: list[str], values: list[float], ylabel: str, path,
              errors: list[float] | None = None, title: str = "") -> Path:
    """Used for the modality ranking, the alpha/beta sweep and the transfer table."""
    fig, ax = _styled((max(4.0, 0.9 * len(labels) + 1.5), 3.6))
    ax.bar(range(len(labels)), values, yerr=errors, color="tab:gray", capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20 if len(labels) > 4 else 0, ha="right" if len(labels) > 4 else "center")
    ax.set_ylabel(ylabel)
    lo = min(values) if values else 0.0
    ax.set_ylim(min(0.0, lo * 1.1), max(values + [1e-9]) * 1.1)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
