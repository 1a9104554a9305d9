"""Network input assembly: per-agent feature sequences, lane resampling,
scene preparation, batching with padding masks, and rigid augmentation of
prepared batches.

Feature layout per observed step is (x, y, vx, vy, ax, ay, dt, valid), all in
the scene frame after normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from . import scene as scene_mod
from .scene import Scene, SceneError, Se2Transform
from .smoothing import SmootherParams, smooth_scene

N_AGENT_FEATURES = 8
_SPEED_EPS = 0.5  # m/s below which a velocity no longer defines a heading


@dataclass(frozen=True, eq=False)
class AgentFeatures:
    """Per-step input features for one agent over the observed window."""

    agent_id: str
    values: np.ndarray  # (n_obs, 8)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != N_AGENT_FEATURES:
            raise SceneError(f"agent features must be (n_obs, {N_AGENT_FEATURES})")


def assemble_features(scene: Scene) -> list[AgentFeatures]:
    """Build the observed-window feature matrix for every agent.

    The scene must be normalized and smoothed (velocity/acceleration fields
    filled); invalid steps carry valid=0 with smoother-filled kinematics.
    The first step's dt feature uses the nominal scene dt.
    """
    out = []
    for track in scene.agents:
        if track.velocities is None or track.accelerations is None:
            raise SceneError(f"track {track.id!r} not smoothed; run smooth_scene first")
        n = scene.n_obs
        dts = np.empty(n)
        dts[0] = scene.dt
        dts[1:] = np.diff(track.timestamps[:n])
        feats = np.column_stack(
            [
                track.positions[:n],
                track.velocities[:n],
                track.accelerations[:n],
                dts,
                track.valid[:n].astype(np.float64),
            ]
        )
        out.append(AgentFeatures(agent_id=track.id, values=feats))
    return out


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """Resample an (P, 2) polyline to ``n`` points at uniform arclength."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])])


def _resampled_tangents(points: np.ndarray) -> np.ndarray:
    diffs = np.diff(points, axis=0)
    lengths = np.maximum(np.linalg.norm(diffs, axis=1), 1e-12)
    segs = diffs / lengths[:, None]
    tans = np.empty_like(points)
    tans[0] = segs[0]
    tans[-1] = segs[-1]
    if len(points) > 2:
        mids = segs[:-1] + segs[1:]
        mids /= np.maximum(np.linalg.norm(mids, axis=1), 1e-12)[:, None]
        tans[1:-1] = mids
    return tans


def _agent_heading(track, scene: Scene) -> np.ndarray:
    """Unit facing direction at the last observed step.

    Falls back from smoothed velocity to observed displacement to the nearest
    lane tangent, then +x, so stationary agents still get a usable heading.
    """
    last = scene.n_obs - 1
    vel = track.velocities[last]
    if np.linalg.norm(vel) > _SPEED_EPS:
        return vel / np.linalg.norm(vel)
    disp = track.positions[last] - track.positions[0]
    if np.linalg.norm(disp) > _SPEED_EPS:
        return disp / np.linalg.norm(disp)
    best, best_d = None, np.inf
    for poly in scene.polylines:
        d = np.linalg.norm(poly.points - track.positions[last], axis=1)
        i = int(np.argmin(d))
        if d[i] < best_d:
            best, best_d = poly.directions[i], d[i]
    if best is not None:
        return np.array(best, dtype=np.float64)
    return np.array([1.0, 0.0])


@dataclass(eq=False)
class PreparedScene:
    """Numeric view of one scene, ready for batching."""

    scene_id: str
    agent_ids: list[str]
    anchor_index: int
    features: np.ndarray  # (N, n_obs, 8) float32
    last_pos: np.ndarray  # (N, 2) smoothed position at the last observed step
    last_vel: np.ndarray  # (N, 2)
    heading: np.ndarray  # (N, 2) unit
    target_pos: np.ndarray  # (N, n_pred, 2)
    target_vel: np.ndarray  # (N, n_pred, 2)
    target_valid: np.ndarray  # (N, n_pred) bool
    lane_points: np.ndarray  # (L, P, 2)
    lane_tangents: np.ndarray  # (L, P, 2)
    lane_widths: np.ndarray  # (L,)
    n_obs: int
    n_pred: int
    dt: float
    # original (unresampled) polyline geometry in the normalized frame, kept
    # for on-road checks and plotting
    raw_polylines: list[np.ndarray] | None = None
    raw_half_widths: np.ndarray | None = None


def prepare_scene(
    scene: Scene,
    lane_points: int = 10,
    map_radius: float = 50.0,
    smoother: SmootherParams = SmootherParams(),
) -> PreparedScene:
    """Normalize, crop, smooth and vectorize one scene.

    Raises UnusableTrackError when the anchor track cannot be smoothed.
    """
    scene = scene.validate()
    scene = scene_mod.normalize_frame(scene)
    scene = scene_mod.crop_polylines(scene, map_radius)
    scene = smooth_scene(scene, smoother)

    feats = assemble_features(scene)
    n_obs, n_pred, dt = scene.n_obs, scene.n_pred, scene.dt
    n_agents = len(scene.agents)

    features = np.stack([f.values for f in feats]).astype(np.float32)
    last_pos = np.stack([t.positions[n_obs - 1] for t in scene.agents])
    last_vel = np.stack([t.velocities[n_obs - 1] for t in scene.agents])
    heading = np.stack([_agent_heading(t, scene) for t in scene.agents])

    target_pos = np.zeros((n_agents, n_pred, 2))
    target_vel = np.zeros((n_agents, n_pred, 2))
    target_valid = np.zeros((n_agents, n_pred), dtype=bool)
    for i, t in enumerate(scene.agents):
        if len(t) >= n_obs + n_pred and n_pred > 0:
            target_pos[i] = t.positions[n_obs : n_obs + n_pred]
            target_vel[i] = t.velocities[n_obs : n_obs + n_pred]
            target_valid[i] = t.valid[n_obs : n_obs + n_pred]

    n_lanes = len(scene.polylines)
    lanes = np.zeros((n_lanes, lane_points, 2))
    tangents = np.zeros((n_lanes, lane_points, 2))
    widths = np.zeros(n_lanes)
    for j, poly in enumerate(scene.polylines):
        pts = resample_polyline(poly.points, lane_points)
        lanes[j] = pts
        tangents[j] = _resampled_tangents(pts)
        widths[j] = poly.width

    return PreparedScene(
        scene_id=scene.scene_id,
        agent_ids=[t.id for t in scene.agents],
        anchor_index=scene.anchor_index,
        features=features,
        last_pos=last_pos,
        last_vel=last_vel,
        heading=heading,
        target_pos=target_pos,
        target_vel=target_vel,
        target_valid=target_valid,
        lane_points=lanes,
        lane_tangents=tangents,
        lane_widths=widths,
        n_obs=n_obs,
        n_pred=n_pred,
        dt=dt,
        raw_polylines=[np.array(p.points) for p in scene.polylines],
        raw_half_widths=np.array([p.width for p in scene.polylines]),
    )


@dataclass(eq=False)
class SceneBatch:
    """Padded tensor batch over scenes; masks mark real agents and lanes."""

    features: torch.Tensor  # (B, N, n_obs, 8)
    agent_mask: torch.Tensor  # (B, N) bool
    last_pos: torch.Tensor  # (B, N, 2)
    last_vel: torch.Tensor  # (B, N, 2)
    heading: torch.Tensor  # (B, N, 2)
    target_pos: torch.Tensor  # (B, N, n_pred, 2)
    target_vel: torch.Tensor  # (B, N, n_pred, 2)
    target_valid: torch.Tensor  # (B, N, n_pred) bool
    lane_points: torch.Tensor  # (B, L, P, 2)
    lane_tangents: torch.Tensor  # (B, L, P, 2)
    lane_mask: torch.Tensor  # (B, L) bool
    anchor_index: torch.Tensor  # (B,) long
    scene_ids: list[str]
    n_obs: int
    n_pred: int
    dt: float

    @property
    def n_scenes(self) -> int:
        return self.features.shape[0]

    def to(self, dtype: torch.dtype) -> "SceneBatch":
        out = replace(self)
        for name in (
            "features", "last_pos", "last_vel", "heading",
            "target_pos", "target_vel", "lane_points", "lane_tangents",
        ):
            setattr(out, name, getattr(self, name).to(dtype))
        return out


def collate(prepared: list[PreparedScene], dtype: torch.dtype = torch.float32) -> SceneBatch:
    """Pad a list of prepared scenes into one batch."""
    if not prepared:
        raise ValueError("cannot collate an empty scene list")
    n_obs, n_pred, dt = prepared[0].n_obs, prepared[0].n_pred, prepared[0].dt
    for p in prepared:
        if (p.n_obs, p.n_pred) != (n_obs, n_pred) or abs(p.dt - dt) > 1e-9:
            raise ValueError("scenes in one batch must share n_obs/n_pred/dt")

    b = len(prepared)
    n_max = max(len(p.agent_ids) for p in prepared)
    l_max = max(1, max(len(p.lane_widths) for p in prepared))
    p_pts = prepared[0].lane_points.shape[1] if prepared[0].lane_points.size else 10
    for p in prepared:
        if p.lane_points.size and p.lane_points.shape[1] != p_pts:
            raise ValueError("scenes in one batch must share the lane resample count")

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float64)

    features = zeros(b, n_max, n_obs, N_AGENT_FEATURES)
    agent_mask = np.zeros((b, n_max), dtype=bool)
    last_pos = zeros(b, n_max, 2)
    last_vel = zeros(b, n_max, 2)
    heading = zeros(b, n_max, 2)
    target_pos = zeros(b, n_max, n_pred, 2)
    target_vel = zeros(b, n_max, n_pred, 2)
    target_valid = np.zeros((b, n_max, n_pred), dtype=bool)
    lane_points = zeros(b, l_max, p_pts, 2)
    lane_tangents = zeros(b, l_max, p_pts, 2)
    lane_mask = np.zeros((b, l_max), dtype=bool)
    anchor_index = np.zeros(b, dtype=np.int64)

    for i, p in enumerate(prepared):
        n = len(p.agent_ids)
        agent_mask[i, :n] = True
        features[i, :n] = p.features
        last_pos[i, :n] = p.last_pos
        last_vel[i, :n] = p.last_vel
        heading[i, :n] = p.heading
        target_pos[i, :n] = p.target_pos
        target_vel[i, :n] = p.target_vel
        target_valid[i, :n] = p.target_valid
        anchor_index[i] = p.anchor_index
        n_l = len(p.lane_widths)
        if n_l:
            lane_points[i, :n_l] = p.lane_points
            lane_tangents[i, :n_l] = p.lane_tangents
            lane_mask[i, :n_l] = True

    def t(arr):
        return torch.as_tensor(arr, dtype=dtype)

    return SceneBatch(
        features=t(features),
        agent_mask=torch.as_tensor(agent_mask),
        last_pos=t(last_pos),
        last_vel=t(last_vel),
        heading=t(heading),
        target_pos=t(target_pos),
        target_vel=t(target_vel),
        target_valid=torch.as_tensor(target_valid),
        lane_points=t(lane_points),
        lane_tangents=t(lane_tangents),
        lane_mask=torch.as_tensor(lane_mask),
        anchor_index=torch.as_tensor(anchor_index),
        scene_ids=[p.scene_id for p in prepared],
        n_obs=n_obs,
        n_pred=n_pred,
        dt=dt,
    )


def transform_batch(batch: SceneBatch, transforms: list[Se2Transform]) -> SceneBatch:
    """Apply one rigid transform per scene to all coordinate tensors.

    Positions rotate then translate; velocities, accelerations, headings and
    lane tangents rotate only.
    """
    if len(transforms) != batch.n_scenes:
        raise ValueError("need one transform per scene")
    dtype = batch.features.dtype
    rot = torch.as_tensor(np.stack([t.matrix for t in transforms]), dtype=dtype)  # (B, 2, 2)
    shift = torch.as_tensor(np.array([t.translation for t in transforms]), dtype=dtype)  # (B, 2)

    def rotate(x):
        return torch.einsum("bij,b...j->b...i", rot, x)

    feats = batch.features.clone()
    feats[..., 0:2] = rotate(feats[..., 0:2]) + shift[:, None, None, :]
    feats[..., 2:4] = rotate(feats[..., 2:4])
    feats[..., 4:6] = rotate(feats[..., 4:6])

    out = replace(batch)
    out.features = feats
    out.last_pos = rotate(batch.last_pos) + shift[:, None, :]
    out.last_vel = rotate(batch.last_vel)
    out.heading = rotate(batch.heading)
    out.target_pos = rotate(batch.target_pos) + shift[:, None, None, :]
    out.target_vel = rotate(batch.target_vel)
    out.lane_points = rotate(batch.lane_points) + shift[:, None, None, :]
    out.lane_tangents = rotate(batch.lane_tangents)
    return out


def augment_batch(
    batch: SceneBatch,
    rng: np.random.Generator,
    rotation_range: tuple[float, float] = scene_mod.ROTATION_RANGE,
    translation_range: tuple[float, float] = scene_mod.TRANSLATION_RANGE,
) -> SceneBatch:
    """Random per-scene rotation/translation augmentation."""
    transforms = [
        scene_mod.sample_random_se2(rng, rotation_range, translation_range)
        for _ in range(batch.n_scenes)
    ]
    return transform_batch(batch, transforms)
