"""Synthetic scene generation.

Scenes are built from three road layouts (straight, curve, T-junction) with
randomized geometry, and optionally a lead vehicle whose behaviour decides
the anchor's future. A leader either cruises, in which case the anchor
relaxes from its approach speed toward the leader's, or brakes to a stop
starting shortly before the last observed step, in which case the anchor
decelerates to rest a short gap behind it. The anchor holds its approach
speed through the whole observation window either way, so the bifurcation
is readable only from the leader's track. Junction scenes fork into a left
or right branch; ``force_branch`` pins the choice while leaving every other
random draw untouched, so branch-paired scenes share geometry and
observation noise exactly. On junction_lead scenes the leader is already
past the fork, so its track also reveals the branch.

Curve scenes place the last observed step a few metres into the arc, making
the turn direction readable from the observed track; junction scenes keep
the anchor on the straight stem with the fork still ahead.

Ground-truth futures lie exactly on lane centerlines; gaussian position
noise goes on observed steps only.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .scene import AgentTrack, Polyline, Scene, Se2Transform, serialize_scene

KINDS = (
    "straight_lead", "curve", "curve_lead",
    "junction", "junction_stop", "junction_lead",
)
JUNCTION_KINDS = ("junction", "junction_stop", "junction_lead")

# half-width of the world-pose rotation. Scenes stay roughly east-bound so a
# desk-scale model can read lane geometry rather than burn capacity on full
# rotation equivariance, yet wide enough that six modes cannot tile the
# junction fan without reading the map
POSE_JITTER = math.pi / 3.0

DEFAULT_MIX = {
    "straight_lead": 0.20,
    "curve": 0.10,
    "curve_lead": 0.20,
    "junction": 0.15,
    "junction_stop": 0.15,
    "junction_lead": 0.20,
}

_STEP = 0.25  # centerline sampling step, metres
_TAU = 1.2  # s; relaxation time of the follow response
_STOP_ACCEL = 2.2  # m/s^2 pull-away from a stop line
_ANCHOR_ID = "agent"
_LEAD_ID = "lead"


def _straight_points(start, tangent, length):
    n = max(2, int(math.ceil(length / _STEP)) + 1)
    t = np.linspace(0.0, length, n)
    return np.asarray(start) + t[:, None] * np.asarray(tangent)


def _arc_points(start, tangent, radius, angle):
    """Circular arc from ``start`` along ``tangent``; positive angle turns
    left. Returns (points, end_tangent)."""
    start = np.asarray(start, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    normal = np.array([-tangent[1], tangent[0]])
    center = start + radius * normal * np.sign(angle)
    n = max(2, int(math.ceil(abs(angle) * radius / _STEP)) + 1)
    thetas = np.linspace(0.0, angle, n)
    cos, sin = np.cos(thetas), np.sin(thetas)
    rel = start - center
    pts = np.stack(
        [center[0] + cos * rel[0] - sin * rel[1],
         center[1] + sin * rel[0] + cos * rel[1]], axis=1
    )
    end_tangent = np.array(
        [math.cos(angle) * tangent[0] - math.sin(angle) * tangent[1],
         math.sin(angle) * tangent[0] + math.cos(angle) * tangent[1]]
    )
    return pts, end_tangent


def _concat(*chunks):
    pts = np.vstack(chunks)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9
    return pts[keep]


class _Path:
    """Arclength-parameterized dense polyline."""

    def __init__(self, points: np.ndarray):
        self.points = points
        seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.total = float(self.s[-1])

    def at(self, s_query: np.ndarray) -> np.ndarray:
        s = np.clip(s_query, 0.0, self.total)
        return np.column_stack(
            [np.interp(s, self.s, self.points[:, 0]),
             np.interp(s, self.s, self.points[:, 1])]
        )


def _chop(points: np.ndarray, spacing: float = 2.5, max_points: int = 12) -> list[np.ndarray]:
    """Split a dense centerline into lane pieces of roughly uniform point
    spacing, each at most ~(max_points * spacing) long, sharing endpoints."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(2, int(math.ceil(s[-1] / spacing)) + 1)
    targets = np.linspace(0.0, s[-1], n)
    dense = np.column_stack(
        [np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])]
    )
    pieces = []
    start = 0
    while start < len(dense) - 1:
        stop = min(start + max_points - 1, len(dense) - 1)
        if len(dense) - 1 - stop == 1:  # avoid a trailing 2-point sliver
            stop = len(dense) - 1
        pieces.append(dense[start : stop + 1].copy())
        start = stop
    return pieces


def _draw_lead(rng, v_range, delta_range):
    """Leader parameters in fixed draw order.

    Every field is drawn whether or not the brake coin lands, so the stream
    consumed per scene does not depend on the outcome.
    """
    v_lead = rng.uniform(*v_range)
    delta = rng.uniform(*delta_range)
    gap = rng.uniform(9.0, 16.0)
    braking = rng.random() < 0.5
    a_lead = rng.uniform(2.5, 3.5)
    t_b = rng.uniform(-1.0, -0.2)
    gap_behind = rng.uniform(1.5, 2.5)
    brake = {"a_lead": a_lead, "t_b": t_b, "gap_behind": gap_behind} if braking else None
    return v_lead, delta, gap, brake


def _leader_s(t, s_last, v_lead, gap, brake):
    """Leader arclength: cruise at v_lead, or uniform braking to rest from
    t_b onward. The cruise line passes s_last + gap at the last observed
    step."""
    s0 = s_last + gap
    cruise = s0 + v_lead * t
    if brake is None:
        return cruise
    a, t_b = brake["a_lead"], brake["t_b"]
    t_stop = t_b + v_lead / a
    slowing = s0 + v_lead * t - 0.5 * a * (t - t_b) ** 2
    stopped = s0 + v_lead * t_stop - 0.5 * a * (t_stop - t_b) ** 2
    return np.where(t <= t_b, cruise, np.where(t <= t_stop, slowing, stopped))


def _anchor_s(t, s_last, v_lead, delta, brake, s_lead_final):
    """Anchor arclength behind a leader: constant approach speed through the
    observation window, then either exponential relaxation to the leader's
    cruise speed or uniform deceleration to rest a short gap behind the
    stopped leader."""
    v0 = v_lead + delta
    past = s_last + v0 * t
    if brake is None:
        future = s_last + v_lead * t + delta * _TAU * (1.0 - np.exp(-t / _TAU))
    else:
        s_target = s_lead_final - brake["gap_behind"]
        dist = s_target - s_last
        a = v0 * v0 / (2.0 * dist)
        t_stop = v0 / a
        future = np.where(
            t <= t_stop, s_last + v0 * t - 0.5 * a * t * t, s_target
        )
    return np.where(t <= 0.0, past, future)


def _lead_pair(t, rng, s_last, v_range, delta_range):
    v_lead, delta, gap, brake = _draw_lead(rng, v_range, delta_range)
    s_lead = _leader_s(t, s_last, v_lead, gap, brake)
    s_anchor = _anchor_s(t, s_last, v_lead, delta, brake, float(s_lead[-1]))
    return s_anchor, s_lead, brake


def generate_scene(
    kind: str,
    rng: np.random.Generator,
    scene_id: str = "",
    force_branch: str | None = None,
    dt: float = 0.1,
    n_obs: int = 20,
    n_pred: int = 30,
    noise_sigma: float = 0.3,
    with_info: bool = False,
):
    """Build one scene of the given kind from the rng stream.

    force_branch ("left"/"right") applies to junction kinds only and does
    not change the number of random draws. With ``with_info`` the return
    value is (scene, info) where info carries the scripted arclengths, the
    brake outcome and, for junctions, the taken branch.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    if force_branch not in (None, "left", "right"):
        raise ValueError("force_branch must be 'left', 'right' or None")
    t = (np.arange(n_obs + n_pred) - (n_obs - 1)) * dt
    branch = None
    brake = None

    if kind == "straight_lead":
        path = _Path(_straight_points((0.0, 0.0), (1.0, 0.0), 110.0))
        centerlines = [path.points]
        s_last = 30.0
        s_anchor, s_lead, brake = _lead_pair(t, rng, s_last, (3.0, 6.0), (2.0, 5.0))
    elif kind in ("curve", "curve_lead"):
        lead_in = rng.uniform(20.0, 30.0)
        radius = rng.uniform(9.0, 14.0)
        angle = math.radians(rng.uniform(65.0, 100.0)) * (1.0 if rng.random() < 0.5 else -1.0)
        arc, end_tan = _arc_points((lead_in, 0.0), (1.0, 0.0), radius, angle)
        exit_straight = _straight_points(arc[-1], end_tan, 50.0)
        path = _Path(_concat(_straight_points((0.0, 0.0), (1.0, 0.0), lead_in), arc, exit_straight))
        centerlines = [path.points]
        s_last = lead_in + rng.uniform(3.0, 6.0)  # turn already begun at t = 0
        if kind == "curve_lead":
            s_anchor, s_lead, brake = _lead_pair(t, rng, s_last, (3.0, 5.0), (2.0, 4.0))
        else:
            v = rng.uniform(3.0, 7.0)
            s_anchor = s_last + v * t
            s_lead = None
    else:
        stem = _straight_points((-50.0, 0.0), (1.0, 0.0), 50.0)
        branches = {}
        for name, sign in (("left", 1.0), ("right", -1.0)):
            radius = rng.uniform(8.0, 12.0)
            # wide angle spread: branch endpoints are not guessable from a
            # geometry prior, the lane polylines have to be read
            angle = sign * math.radians(rng.uniform(45.0, 135.0))
            arc, end_tan = _arc_points((0.0, 0.0), (1.0, 0.0), radius, angle)
            branches[name] = _concat(arc, _straight_points(arc[-1], end_tan, 35.0))
        centerlines = [stem, branches["left"], branches["right"]]

        if kind == "junction":
            v = rng.uniform(5.5, 7.5)
            d_pre = rng.uniform(3.0, 8.0)
            s_last = 50.0 - d_pre
            s_anchor = s_last + v * t
            s_lead = None
        elif kind == "junction_stop":
            s_stop = 48.0
            s_anchor = np.where(t <= 0.0, s_stop, s_stop + 0.5 * _STOP_ACCEL * t * t)
            s_lead = None
        else:  # junction_lead
            d_pre = rng.uniform(4.0, 8.0)
            s_last = 50.0 - d_pre
            s_anchor, s_lead, brake = _lead_pair(t, rng, s_last, (3.5, 6.0), (2.0, 4.0))

        coin = "left" if rng.random() < 0.5 else "right"
        branch = force_branch or coin
        path = _Path(_concat(stem, branches[branch]))

    rotation = rng.uniform(-POSE_JITTER, POSE_JITTER)
    shift = rng.uniform(-20.0, 20.0, size=2)
    pose = Se2Transform(rotation=rotation, translation=shift)

    timestamps = np.arange(n_obs + n_pred) * dt
    tracks = []
    anchor_pos = pose.apply(path.at(s_anchor))
    anchor_pos[:n_obs] += rng.normal(0.0, noise_sigma, size=(n_obs, 2))
    tracks.append(AgentTrack(id=_ANCHOR_ID, timestamps=timestamps, positions=anchor_pos,
                             valid=np.ones(n_obs + n_pred, dtype=bool)))
    if s_lead is not None:
        lead_pos = pose.apply(path.at(s_lead))
        lead_pos[:n_obs] += rng.normal(0.0, noise_sigma, size=(n_obs, 2))
        tracks.append(AgentTrack(id=_LEAD_ID, timestamps=timestamps, positions=lead_pos,
                                 valid=np.ones(n_obs + n_pred, dtype=bool)))

    polylines = []
    for line in centerlines:
        for piece in _chop(line):
            polylines.append(Polyline(points=pose.apply(piece)))

    scene = Scene(
        agents=tuple(tracks),
        polylines=tuple(polylines),
        anchor_id=_ANCHOR_ID,
        dt=dt,
        n_obs=n_obs,
        n_pred=n_pred,
        scene_id=scene_id,
    ).validate()
    if with_info:
        info = {
            "kind": kind,
            "branch": branch,
            "brake": brake,
            "s_anchor": s_anchor,
            "s_lead": s_lead,
            "path_total": path.total,
        }
        return scene, info
    return scene


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scene generator; independent of generation order."""
    return np.random.default_rng([seed, index])


def pick_kind(rng: np.random.Generator, mix: dict[str, float] = DEFAULT_MIX) -> str:
    kinds = sorted(mix)
    probs = np.array([mix[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()
    return kinds[int(rng.choice(len(kinds), p=probs))]


def generate_dataset(
    out_dir,
    n_scenes: int,
    seed: int,
    mix: dict[str, float] = DEFAULT_MIX,
    val_every: int = 10,
) -> dict:
    """Write a train/val scene corpus plus a manifest.

    Regenerating with the same arguments reproduces every file byte for
    byte. Scene i draws from its own seed stream, so the corpus content
    does not depend on generation order or count.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "val").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        rng = scene_rng(seed, i)
        kind = pick_kind(rng, mix)
        scene = generate_scene(kind, rng, scene_id=f"{kind}-{i:05d}")
        split = "val" if i % val_every == 0 else "train"
        rel = f"{split}/{scene.scene_id}.json"
        text = serialize_scene(scene)
        (out / rel).write_text(text)
        entries.append({
            "file": rel,
            "kind": kind,
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        })
    manifest = {
        "seed": seed,
        "n_scenes": n_scenes,
        "mix": mix,
        "val_every": val_every,
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(root) -> tuple[list[Scene], list[Scene]]:
    """Read a generated corpus back; returns (train, val) scene lists."""
    from .scene import load_scene

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    train, val = [], []
    for entry in manifest["scenes"]:
        scene = load_scene(root / entry["file"])
        (val if entry["file"].startswith("val/") else train).append(scene)
    return train, val
