"""Figures for benchmark runs (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from sdareid.runner import RunRecord

COLORS = {"sda": "tab:blue", "sft": "tab:orange", "dt": "tab:gray"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # no version string, so identical runs give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_forgetting(records: list["RunRecord"], path: Path) -> Path:
    """Source-domain mAP after each adaptation, one line per run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rec in records:
        steps = range(len(rec.source_history))
        ax.plot(steps, rec.source_history, marker="o", color=COLORS.get(rec.method), label=rec.method.upper())
    ax.set_xticks(range(max(len(r.source_history) for r in records)))
    ax.set_xlabel("domains adapted")
    ax.set_ylabel("source mAP")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_adaptation(records: list["RunRecord"], path: Path) -> Path:
    """Grouped bars of new-domain mAP right after each adaptation."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(1, len(records))
    for j, rec in enumerate(records):
        doms = [r.domain for r in rec.adaptation]
        xs = [d + (j - (len(records) - 1) / 2) * width for d in doms]
        ax.bar(xs, [r.mAP for r in rec.adaptation], width, color=COLORS.get(rec.method), label=rec.method.upper())
    ax.set_xlabel("domain")
    ax.set_ylabel("adaptation mAP")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_k_sweep(ks: list[int], means: dict[str, list[float]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, vals in means.items():
        ax.plot(ks, vals, marker="o", label=label)
    ax.set_xlabel("few-shot identities")
    ax.set_ylabel("mean adaptation mAP")
    ax.set_xticks(ks)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def render_run_figures(record: "RunRecord", directory: str | Path) -> list[Path]:
    d = Path(directory)
    return [plot_forgetting([record], d / "forgetting.png"), plot_adaptation([record], d / "adaptation.png")]
