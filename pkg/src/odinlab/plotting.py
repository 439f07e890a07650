"""Static SVG scatter-plus-front plots."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import ParetoPoint, pareto_front  # noqa: E402


def plot_fronts(points: dict[str, list[ParetoPoint]], path, l_sft: float | None = None,
                title: str = "win score vs. mean length"):
    """Scatter every point per method and draw its Pareto front as a step line."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (method, pts) in enumerate(sorted(points.items())):
        color = f"C{i}"
        ax.scatter([p.mean_length for p in pts], [p.win_score for p in pts], s=14, alpha=0.5,
                   color=color, label=f"{method} runs")
        front = pareto_front(pts)
        if front:
            xs = [p.mean_length for p in front]
            ys = [p.win_score for p in front]
            ax.step(xs, ys, where="post", color=color, lw=1.8, label=f"{method} front")
    if l_sft is not None:
        ax.axvline(l_sft, color="gray", ls="--", lw=1, label="SFT length")
    ax.axhline(50, color="gray", ls=":", lw=1)
    ax.set_xlabel("mean response length")
    ax.set_ylabel("win score vs SFT")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
