"""PNG figures for the ``report`` command. Training code never imports this module."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_curves(report: dict, path) -> Path:
    """Held-out accuracy per batch for the quantized and float tracks."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("quantized", "4-bit simulated" if report["config"]["bits"] == 4 else "quantized"), ("reference", "fp32")):
        track = report.get(key)
        if track is None:
            continue
        ys = [track["initial_accuracy"], *track["curve"]]
        ax.plot(range(len(ys)), [100 * y for y in ys], label=label, lw=1.2)
    ax.set_xlabel("batch")
    ax.set_ylabel("test accuracy (%)")
    ax.set_title(f"{report['spec']['kind']} on {report['dataset']}", fontsize=9)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pbs_counts(cost: dict, path) -> Path:
    """PBS count per input width, table lookups and rounding bit extractions stacked."""
    table = {int(k): v for k, v in cost.get("pbs_by_width", {}).items()}
    rounding = {int(k): v for k, v in cost.get("rounding_pbs_by_width", {}).items()}
    widths = sorted(set(table) | set(rounding))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    t = [table.get(w, 0) for w in widths]
    r = [rounding.get(w, 0) for w in widths]
    ax.bar(widths, t, label="table PBS")
    ax.bar(widths, r, bottom=t, label="rounding PBS")
    ax.set_xlabel("PBS input width (bits)")
    ax.set_ylabel("PBS per batch")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
