"""Render run-report metrics as figures next to the emitted report files.

Only metric plots are produced here (loss traces, score trajectories, MAC
ratios); decoded-image rendering is out of scope for the toy pipeline.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .harness import RunReport  # noqa: E402


def render_report_figures(reports: list[RunReport], out_path: str | Path) -> list[Path]:
    """Write the standard figure set alongside the report at out_path.

    Produces <stem>_loss.png when any run carries a loss trace,
    <stem>_scores.png with per-run score trajectories, and <stem>_mac.png
    with the attention MAC ratios. Returns the written paths.
    """
    out_path = Path(out_path)
    stem = out_path.with_suffix("")
    written = []

    traced = [r for r in reports if r.loss_trace]
    if traced:
        fig, ax = plt.subplots(figsize=(7, 4))
        for r in traced:
            ax.plot(r.loss_trace, label=f"{r.mode} seed={r.noise_seed}")
        ax.set_xlabel("inner step")
        ax.set_ylabel("joint loss")
        ax.set_title("Noise optimization loss trace (winning round)")
        ax.legend(fontsize=8)
        path = Path(f"{stem}_loss.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for r in reports:
        steps = range(len(r.s_cross_trajectory))
        ax.plot(steps, r.s_cross_trajectory, alpha=0.8,
                label=f"cross {r.mode} seed={r.noise_seed}")
        ax.plot(steps, r.s_self_trajectory, alpha=0.8, linestyle="--",
                label=f"self {r.mode} seed={r.noise_seed}")
    ax.set_xlabel("inner step")
    ax.set_ylabel("score")
    ax.set_title("Attention diagnostic scores")
    if len(reports) <= 6:
        ax.legend(fontsize=7)
    path = Path(f"{stem}_scores.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"{r.mode}\nseed={r.noise_seed}" for r in reports]
    ax.bar(range(len(reports)), [r.mac_ratio for r in reports], color="#4477aa")
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("self-attention MAC ratio (pruned / baseline)")
    ax.set_ylim(0, 1.05)
    ax.set_title("Pruning speedup per run")
    path = Path(f"{stem}_mac.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
