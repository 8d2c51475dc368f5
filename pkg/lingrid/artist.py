import os
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import seaborn as sns  # noqa: E402

PathT = os.PathLike

CMAP = sns.color_palette("rocket", as_cmap=True)
PALETTE = sns.color_palette("deep")
TERM_STYLE = {"L_I": "-", "L_T": "--", "L_dis": "-.", "L_rec": ":", "L_rank": "--"}


def minwhere(li: Sequence[float]) -> Tuple[int, float]:
    i = int(np.argmin(li))
    return i, float(li[i])


def convergence_plot(
    rows: List[Dict[str, float]],
    figname: PathT = None,
    terms: Sequence[str] = ("L_I", "L_T", "L_dis", "L_rec", "L_rank"),
) -> None:
    """Total loss per step with its minimum marked, plus each active term."""
    fig = plt.figure()
    ax = fig.add_subplot(111)

    total = [r["total"] for r in rows]
    ax.plot(total, color=PALETTE[0], label="total")
    for color, term in zip(PALETTE[1:], terms):
        values = [r[term] for r in rows]
        if any(values):
            ax.plot(values, TERM_STYLE[term], color=color, linewidth=0.8, label=term)

    star_i, star_loss = minwhere(total)
    ax.plot(star_i, star_loss, "or")

    ax.set_xlabel("steps")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    sns.despine()

    if figname:
        ax.set_title(Path(figname).stem)
        print("Saving fig to:", figname)
        fig.savefig(figname)
    plt.close(fig)


def heatmap_overlay(
    image: np.ndarray,
    grid: np.ndarray,
    figname: PathT = None,
    title: str = "",
    alpha: float = 0.5,
) -> None:
    fig = plt.figure(figsize=(3, 5))
    ax = fig.add_subplot(111)
    ax.imshow(np.clip(image, 0.0, 1.0), interpolation="nearest")
    ax.imshow(grid, cmap=CMAP, alpha=alpha, vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)

    if figname:
        print("Saving fig to:", figname)
        fig.savefig(figname, bbox_inches="tight")
    plt.close(fig)
