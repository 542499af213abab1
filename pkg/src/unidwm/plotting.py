"""Report figures written to files (non-interactive backend)."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalsuite import EvalReport  # noqa: E402


def plot_losses(rows: Sequence[list], path) -> None:
    """Loss curves from metric rows (phase, step, L_N, L_D, L, lr)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase, style in (("a", "--"), ("joint", "-")):
        sel = [r for r in rows if r[0] == phase]
        if not sel:
            continue
        steps = [r[1] for r in sel]
        ax.plot(steps, [r[3] for r in sel], style, label=f"depth L1 ({phase})")
        if phase == "joint":
            ax.plot(steps, [r[2] for r in sel], style, label="next-token")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_horizons(reports: Sequence[EvalReport], path) -> None:
    """Mean Chamfer per horizon for each report, with the Copy&Paste baseline of the first."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in reports:
        hs = rep.horizons
        ax.plot(hs, [rep.mean("model_cd", h) for h in hs], "o-", label=rep.label)
    if reports:
        hs = reports[0].horizons
        ax.plot(hs, [reports[0].mean("copy_paste_cd", h) for h in hs], "s--", color="gray", label="copy&paste")
    ax.set_xlabel("horizon (s)")
    ax.set_ylabel("Chamfer distance (m)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bev_clouds(generated, truth, path, title: str = "") -> None:
    """Top-down scatter of generated and ground-truth clouds per frame."""
    n = len(truth)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
    for f, ax in enumerate(axes[0]):
        ax.scatter(truth[f][:, 0], truth[f][:, 1], s=2, c="k", label="truth")
        if len(generated[f]):
            ax.scatter(generated[f][:, 0], generated[f][:, 1], s=2, c="tab:red", label="generated")
        ax.set_title(f"{f} s", fontsize=9)
        ax.set_aspect("equal")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
