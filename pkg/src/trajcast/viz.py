"""Forecast rendering to image files (headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .features import PreparedScene


def render_forecast(
    prepared: PreparedScene,
    trajectories: np.ndarray | None = None,
    probabilities: np.ndarray | None = None,
    out_path=None,
):
    """Draw one scene: lanes gray, observed track blue, ground truth green,
    predicted modes red with opacity by probability."""
    fig, ax = plt.subplots(figsize=(7, 7))
    for poly in prepared.raw_polylines or []:
        ax.plot(poly[:, 0], poly[:, 1], color="0.75", lw=1.0, zorder=1)

    a = prepared.anchor_index
    for i in range(len(prepared.agent_ids)):
        if i == a:
            continue
        obs = prepared.features[i, :, 0:2]
        ax.plot(obs[:, 0], obs[:, 1], color="steelblue", lw=1.0, alpha=0.5, zorder=2)
    obs = prepared.features[a, :, 0:2]
    ax.plot(obs[:, 0], obs[:, 1], color="tab:blue", lw=2.0, label="observed", zorder=4)

    if prepared.target_valid[a].any():
        gt = prepared.target_pos[a][prepared.target_valid[a]]
        ax.plot(gt[:, 0], gt[:, 1], color="tab:green", lw=2.0, label="ground truth", zorder=4)

    if trajectories is not None:
        probs = probabilities
        if probs is None:
            probs = np.full(len(trajectories), 1.0 / max(len(trajectories), 1))
        top = probs.max() if len(probs) else 1.0
        for i, traj in enumerate(trajectories):
            alpha = 0.25 + 0.75 * float(probs[i] / top) if top > 0 else 1.0
            label = "forecast" if i == 0 else None
            ax.plot(traj[:, 0], traj[:, 1], color="tab:red", lw=1.5, alpha=alpha,
                    label=label, zorder=3)

    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(prepared.scene_id or "scene")
    if out_path is not None:
        fig.savefig(out_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        return None
    return fig
