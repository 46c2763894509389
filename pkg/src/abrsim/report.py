"""Figure rendering for run artifacts.

Renders three PNGs next to the delimited outputs: allowed-rate series,
queue occupancy, and feedback-return ratios.  Uses the Agg backend so a
headless run never touches a display.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import RunResult


def _label(key: tuple[int, int]) -> str:
    return f"vc{key[0]}.src{key[1]}"


def _ratio_series(result: RunResult, key: tuple[int, int]) -> list[float | None]:
    out: list[float | None] = []
    for frms, brms in zip(result.frms[key], result.brms[key]):
        out.append(brms / frms if frms else None)
    return out


def write_figures(result: RunResult, out_dir: str) -> list[str]:
    """Render acr.png, queues.png, ratios.png into ``out_dir``."""
    times = result.times
    written = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in result.source_keys:
        ax.plot(times, result.acr[key], label=_label(key), drawstyle="steps-post")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("allowed cell rate [cells/s]")
    ax.set_title("allowed rate per source")
    ax.legend(loc="best", fontsize="small")
    ax.grid(True, alpha=0.3)
    path = os.path.join(out_dir, "acr.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for link_id in sorted(result.queues):
        ax.plot(times, result.queues[link_id], label=f"link {link_id}", drawstyle="steps-post")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("queue occupancy [cells]")
    ax.set_title("queue per link")
    ax.legend(loc="best", fontsize="small", ncol=2)
    ax.grid(True, alpha=0.3)
    path = os.path.join(out_dir, "queues.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in result.source_keys:
        series = _ratio_series(result, key)
        ax.plot(times, series, label=_label(key), drawstyle="steps-post")
    transits = [
        t / d if d else None
        for t, d in zip(
            result.brm_transits,
            [
                sum(result.frms[k][i] * result.hops[k] for k in result.source_keys)
                for i in range(len(times))
            ],
        )
    ]
    ax.plot(times, transits, label="network (hop-normalized)", linestyle="--", color="black")
    ax.axhline(1.0, color="gray", linewidth=0.8, alpha=0.6)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("backward / forward RM cells")
    ax.set_title("feedback return ratio")
    ax.legend(loc="best", fontsize="small")
    ax.grid(True, alpha=0.3)
    path = os.path.join(out_dir, "ratios.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
