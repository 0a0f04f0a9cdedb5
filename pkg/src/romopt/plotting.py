"""Report figures (PNG, non-interactive backend, reproducible bytes)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse as EllipsePatch  # noqa: E402

_META = {"Software": None}


def _save(ctx, fig, rel):
    fig.savefig(ctx.path(rel), dpi=100, metadata=_META)
    plt.close(fig)
    ctx.add_output(rel)


def contaminant_figures(ctx, times, f_tilde, f_bar, nodes, q_tilde, q_bar, lo, hi):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(times, f_tilde, label=r"ROM optimum $\tilde z$")
    ax.plot(times, f_bar, label=r"updated $\bar z$")
    ax.set_xlabel("t")
    ax.set_ylabel("zone cost")
    ax.legend()
    fig.tight_layout()
    _save(ctx, fig, "report/objective_vs_time.png")

    n_q = q_tilde.shape[0]
    cols = 4
    rows = int(np.ceil(n_q / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.2 * rows), sharex=True, squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        if i >= n_q:
            ax.axis("off")
            continue
        ax.fill_between(nodes, lo[i], hi[i], color="0.8", lw=0)
        ax.plot(nodes, q_tilde[i], lw=1)
        ax.plot(nodes, q_bar[i], lw=1)
        ax.set_title(f"source {i}", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    _save(ctx, fig, "report/controls.png")


def fire_figure(ctx, truth, z_tilde, z_bar, samples, ellipses):
    fig, ax = plt.subplots(figsize=(5, 5))
    for j, (S, e) in enumerate(zip(samples, ellipses)):
        ax.scatter(S[:, 0], S[:, 1], s=2, color="0.7")
        ax.add_patch(EllipsePatch(e.center, 2 * e.semi_axes[0], 2 * e.semi_axes[1], angle=np.degrees(e.rotation),
                                  fill=False, color="C2"))
    ax.scatter(*truth.T, marker="*", s=80, color="k", label="true ignition")
    ax.scatter(*z_tilde.T, marker="x", color="C0", label=r"$\tilde z$")
    ax.scatter(*z_bar.T, marker="o", facecolor="none", color="C3", label=r"$\bar z$")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(ctx, fig, "report/ignitions.png")
