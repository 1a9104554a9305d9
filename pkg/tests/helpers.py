"""Shared test utilities: tiny configs, hand-built batches, and a central
difference gradient checker."""

from __future__ import annotations

import numpy as np
import torch

from trajcast.features import SceneBatch
from trajcast.model import ModelConfig


def micro_config(**overrides) -> ModelConfig:
    """Model dimensions small enough for exhaustive finite differencing.

    map_every_n * dt still covers one second, matching the full-size layout.
    """
    base = dict(
        d_model=8,
        n_heads=2,
        n_modes=2,
        n_obs=4,
        n_pred=4,
        dt=0.5,
        map_every_n=2,
        lane_points=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(
    rng: np.random.Generator,
    n_scenes: int = 2,
    n_agents: int = 2,
    n_lanes: int = 2,
    cfg: ModelConfig | None = None,
    dtype: torch.dtype = torch.float64,
) -> SceneBatch:
    """Directly assembled random batch, bypassing the scene pipeline."""
    cfg = cfg or micro_config()

    def t(*shape, scale=1.0):
        return torch.as_tensor(rng.normal(size=shape) * scale, dtype=dtype)

    def unit(*shape):
        v = rng.normal(size=shape)
        return torch.as_tensor(v / np.linalg.norm(v, axis=-1, keepdims=True), dtype=dtype)

    return SceneBatch(
        features=t(n_scenes, n_agents, cfg.n_obs, 8),
        agent_mask=torch.ones(n_scenes, n_agents, dtype=torch.bool),
        last_pos=t(n_scenes, n_agents, 2, scale=3.0),
        last_vel=t(n_scenes, n_agents, 2),
        heading=unit(n_scenes, n_agents, 2),
        target_pos=t(n_scenes, n_agents, cfg.n_pred, 2, scale=3.0),
        target_vel=t(n_scenes, n_agents, cfg.n_pred, 2),
        target_valid=torch.ones(n_scenes, n_agents, cfg.n_pred, dtype=torch.bool),
        lane_points=t(n_scenes, n_lanes, cfg.lane_points, 2, scale=5.0),
        lane_tangents=unit(n_scenes, n_lanes, cfg.lane_points, 2),
        lane_mask=torch.ones(n_scenes, n_lanes, dtype=torch.bool),
        anchor_index=torch.zeros(n_scenes, dtype=torch.long),
        scene_ids=[f"scene-{i}" for i in range(n_scenes)],
        n_obs=cfg.n_obs,
        n_pred=cfg.n_pred,
        dt=cfg.dt,
    )


def fd_check(
    loss_fn,
    leaves,
    h: float = 1e-5,
    rtol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> int:
    """Compare autograd gradients of the scalar ``loss_fn()`` against central
    differences for every coordinate of every leaf tensor (or a random
    sample of ``max_coords`` per leaf). Returns the number of coordinates
    checked; raises AssertionError on the first mismatch.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    checked = 0
    for leaf, grad in zip(leaves, grads):
        gflat = (torch.zeros_like(leaf) if grad is None else grad).reshape(-1)
        flat = leaf.data.view(-1)
        idx = np.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            idx = rng.choice(flat.numel(), size=max_coords, replace=False)
        for i in idx:
            i = int(i)
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                hi = float(loss_fn())
                flat[i] = orig - h
                lo = float(loss_fn())
                flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            ana = float(gflat[i])
            tol = rtol * (1.0 + max(abs(ana), abs(fd)))
            assert abs(ana - fd) <= tol, (
                f"gradient mismatch at flat index {i}: autograd {ana:.10g} "
                f"vs finite difference {fd:.10g} (tol {tol:.3g})"
            )
            checked += 1
    return checked
