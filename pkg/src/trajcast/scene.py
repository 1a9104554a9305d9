"""Scene-level domain types: agent tracks, lane polylines, rigid transforms,
frame normalization and scene (de)serialization.

All types are immutable value objects; every operation returns a new Scene.
Coordinates are meters in an arbitrary world frame until ``normalize_frame``
re-centers the scene on the anchor agent's last observed position.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

ANCHOR_OBJECT_TYPE = "AGENT"
CSV_COLUMNS = ("TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME")

# Augmentation defaults: full-circle rotation, translations small enough to
# stay inside typical map coverage.
ROTATION_RANGE = (0.0, 2.0 * math.pi)
TRANSLATION_RANGE = (-10.0, 10.0)

DIRECTION_NORM_TOL = 1e-6


class SceneError(ValueError):
    """A scene violates a structural invariant."""


class SceneFormatError(SceneError):
    """A scene file could not be parsed; message names the offending part."""


def _frozen_array(values, dtype=np.float64, ndim=None, name="array") -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise SceneError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Se2Transform:
    """Planar rigid transform: rotate by ``rotation`` radians, then translate."""

    rotation: float
    translation: tuple[float, float]

    @staticmethod
    def identity() -> "Se2Transform":
        return Se2Transform(0.0, (0.0, 0.0))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate then translate an (..., 2) array of points."""
        return points @ self.matrix.T + np.asarray(self.translation)

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotation-only part, for velocities, accelerations and tangents."""
        return vectors @ self.matrix.T

    def inverse(self) -> "Se2Transform":
        t = self.matrix.T @ np.asarray(self.translation)
        return Se2Transform(-self.rotation, (-t[0], -t[1]))

    def compose(self, other: "Se2Transform") -> "Se2Transform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        t = self.apply(np.asarray(other.translation))
        return Se2Transform(self.rotation + other.rotation, (float(t[0]), float(t[1])))


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Observed (and optionally future) motion of one agent.

    ``velocities`` and ``accelerations`` are filled by preprocessing; raw
    tracks carry only positions, a validity mask and timestamps.
    """

    id: str
    timestamps: np.ndarray  # (L,)
    positions: np.ndarray  # (L, 2)
    valid: np.ndarray  # (L,) bool
    velocities: np.ndarray | None = None  # (L, 2)
    accelerations: np.ndarray | None = None  # (L, 2)

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _frozen_array(self.timestamps, ndim=1, name="timestamps"))
        object.__setattr__(self, "positions", _frozen_array(self.positions, ndim=2, name="positions"))
        object.__setattr__(self, "valid", _frozen_array(self.valid, dtype=bool, ndim=1, name="valid"))
        for attr in ("velocities", "accelerations"):
            val = getattr(self, attr)
            if val is not None:
                object.__setattr__(self, attr, _frozen_array(val, ndim=2, name=attr))
        n = len(self.timestamps)
        if not (len(self.positions) == len(self.valid) == n):
            raise SceneError(f"track {self.id}: positions/valid/timestamps lengths differ")
        if n >= 2 and not np.all(np.diff(self.timestamps) > 0):
            raise SceneError(f"track {self.id}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered lane-centerline point sequence with unit tangents.

    ``width`` is the corridor half-width used for drivable-area checks; lanes
    without an explicit width get the 2 m default.
    """

    points: np.ndarray  # (P, 2)
    directions: np.ndarray | None = None  # (P, 2) unit tangents
    width: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, ndim=2, name="points"))
        if len(self.points) < 2:
            raise SceneError("polyline needs at least 2 points")
        if self.directions is None:
            object.__setattr__(self, "directions", _frozen_array(_tangents(self.points), ndim=2))
        else:
            object.__setattr__(self, "directions", _frozen_array(self.directions, ndim=2, name="directions"))
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > DIRECTION_NORM_TOL):
            raise SceneError("polyline directions must have unit norm")

    def __len__(self) -> int:
        return len(self.points)


def _tangents(points: np.ndarray) -> np.ndarray:
    diffs = np.diff(points, axis=0)
    lengths = np.linalg.norm(diffs, axis=1)
    if np.any(lengths < 1e-12):
        raise SceneError("polyline has repeated consecutive points")
    segs = diffs / lengths[:, None]
    tans = np.empty_like(points)
    tans[0] = segs[0]
    tans[-1] = segs[-1]
    if len(points) > 2:
        mids = segs[:-1] + segs[1:]
        mids /= np.linalg.norm(mids, axis=1)[:, None]
        tans[1:-1] = mids
    return tans


@dataclass(frozen=True, eq=False)
class Scene:
    """One forecasting sample: agents, lane polylines and timing metadata.

    The first ``n_obs`` steps of each track are observations; training scenes
    additionally carry ``n_pred`` future steps as ground truth.
    ``frame_transform`` records the rigid transform that maps original world
    coordinates into the scene's current frame (None until one is applied).
    """

    agents: tuple[AgentTrack, ...]
    polylines: tuple[Polyline, ...]
    anchor_id: str
    dt: float = 0.1
    n_obs: int = 20
    n_pred: int = 30
    scene_id: str = ""
    frame_transform: Se2Transform | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "polylines", tuple(self.polylines))

    @property
    def anchor(self) -> AgentTrack:
        for track in self.agents:
            if track.id == self.anchor_id:
                return track
        raise SceneError(f"scene {self.scene_id!r}: anchor track {self.anchor_id!r} missing")

    @property
    def anchor_index(self) -> int:
        for i, track in enumerate(self.agents):
            if track.id == self.anchor_id:
                return i
        raise SceneError(f"scene {self.scene_id!r}: anchor track {self.anchor_id!r} missing")

    def validate(self) -> "Scene":
        """Check structural invariants, returning self so calls can chain."""
        if self.dt <= 0:
            raise SceneError("dt must be positive")
        ids = [t.id for t in self.agents]
        if ids.count(self.anchor_id) != 1:
            raise SceneError(
                f"scene {self.scene_id!r}: anchor id {self.anchor_id!r} matches "
                f"{ids.count(self.anchor_id)} tracks, expected exactly 1"
            )
        if len(set(ids)) != len(ids):
            raise SceneError(f"scene {self.scene_id!r}: duplicate track ids")
        lengths = {len(t) for t in self.agents}
        if not lengths <= {self.n_obs, self.n_obs + self.n_pred}:
            raise SceneError(
                f"scene {self.scene_id!r}: track lengths {sorted(lengths)} do not match "
                f"n_obs={self.n_obs} (+ n_pred={self.n_pred})"
            )
        base = self.agents[0].timestamps if self.agents else None
        for t in self.agents:
            m = min(len(t), len(base))
            if not np.allclose(t.timestamps[:m], base[:m], atol=1e-9):
                raise SceneError(f"scene {self.scene_id!r}: track {t.id!r} not on the shared time base")
        return self


def normalize_frame(scene: Scene) -> Scene:
    """Translate the scene so the anchor's last observed position is (0, 0).

    The applied transform is recorded on the returned scene (composed with any
    previous one) so predictions can be mapped back to original coordinates.
    """
    anchor = scene.anchor  # raises with diagnostic when the track is missing
    last = scene.n_obs - 1
    if last >= len(anchor) or not anchor.valid[last]:
        raise SceneError(
            f"scene {scene.scene_id!r}: anchor {scene.anchor_id!r} has no valid "
            f"observation at step {last}"
        )
    origin = anchor.positions[last]
    shift = Se2Transform(0.0, (-float(origin[0]), -float(origin[1])))
    return apply_se2(scene, shift)


def apply_se2(scene: Scene, transform: Se2Transform) -> Scene:
    """Rigidly transform every agent and polyline in the scene.

    Positions are rotated then translated; velocities, accelerations and lane
    tangents are rotated only; masks and timestamps are untouched.
    """
    agents = tuple(
        replace(
            t,
            positions=transform.apply(t.positions),
            velocities=None if t.velocities is None else transform.rotate(t.velocities),
            accelerations=None if t.accelerations is None else transform.rotate(t.accelerations),
        )
        for t in scene.agents
    )
    polylines = tuple(
        replace(p, points=transform.apply(p.points), directions=transform.rotate(p.directions))
        for p in scene.polylines
    )
    frame = transform.compose(scene.frame_transform or Se2Transform.identity())
    return replace(scene, agents=agents, polylines=polylines, frame_transform=frame)


def sample_random_se2(
    seed: int | np.random.Generator,
    rotation_range: tuple[float, float] = ROTATION_RANGE,
    translation_range: tuple[float, float] = TRANSLATION_RANGE,
) -> Se2Transform:
    """Draw a random rigid transform for training-time augmentation."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rot = float(rng.uniform(*rotation_range))
    tx, ty = rng.uniform(*translation_range, size=2)
    return Se2Transform(rot, (float(tx), float(ty)))


def crop_polylines(scene: Scene, radius: float = 50.0) -> Scene:
    """Keep only polylines with at least one point within ``radius`` of the
    anchor's last observed position."""
    center = scene.anchor.positions[scene.n_obs - 1]
    kept = tuple(
        p for p in scene.polylines
        if np.min(np.linalg.norm(p.points - center, axis=1)) <= radius
    )
    return replace(scene, polylines=kept)


# --- serialization ----------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "n_obs": scene.n_obs,
        "n_pred": scene.n_pred,
        "anchor_id": scene.anchor_id,
        "agents": [
            {
                "id": t.id,
                "timestamps": t.timestamps.tolist(),
                "xy": t.positions.tolist(),
                "valid": t.valid.tolist(),
            }
            for t in scene.agents
        ],
        "polylines": [
            {"points": p.points.tolist(), "width": p.width} for p in scene.polylines
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    try:
        agents = tuple(
            AgentTrack(
                id=str(a["id"]),
                timestamps=a["timestamps"],
                positions=a["xy"],
                valid=a["valid"],
            )
            for a in doc["agents"]
        )
        polylines = tuple(
            Polyline(points=p["points"], width=float(p.get("width", 2.0)))
            for p in doc["polylines"]
        )
        scene = Scene(
            agents=agents,
            polylines=polylines,
            anchor_id=str(doc["anchor_id"]),
            dt=float(doc["dt"]),
            n_obs=int(doc["n_obs"]),
            n_pred=int(doc["n_pred"]),
            scene_id=str(doc.get("scene_id", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneFormatError(f"malformed scene document: {exc}") from exc
    return scene.validate()


def serialize_scene(scene: Scene) -> str:
    """Canonical JSON encoding; stable byte-for-byte across round trips."""
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":")) + "\n"


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scene(scene))


def load_scene(path, fmt: str = "native-json") -> Scene:
    """Load and validate a scene file.

    ``fmt`` is "native-json" or "argoverse-csv"; CSV rows are grouped by track
    id and re-sorted by timestamp, and the AGENT object type becomes the
    anchor.
    """
    if fmt == "native-json":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path}: invalid JSON: {exc}") from exc
        return scene_from_dict(doc)
    if fmt == "argoverse-csv":
        return _load_argoverse_csv(path)
    raise ValueError(f"unknown scene format {fmt!r}")


def _load_argoverse_csv(path, n_obs: int = 20, n_pred: int = 30) -> Scene:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SceneFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        unknown = set(header) - set(CSV_COLUMNS)
        missing = set(CSV_COLUMNS) - set(header)
        if unknown:
            raise SceneFormatError(f"{path}: unknown columns {sorted(unknown)}")
        if missing:
            raise SceneFormatError(f"{path}: missing columns {sorted(missing)}")
        col = {name: header.index(name) for name in CSV_COLUMNS}

        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise SceneFormatError(f"{path}: row {lineno}: expected {len(header)} fields")
            try:
                rows.append(
                    (
                        float(raw[col["TIMESTAMP"]]),
                        raw[col["TRACK_ID"]].strip(),
                        raw[col["OBJECT_TYPE"]].strip(),
                        float(raw[col["X"]]),
                        float(raw[col["Y"]]),
                    )
                )
            except ValueError as exc:
                raise SceneFormatError(f"{path}: row {lineno}: {exc}") from exc

    if not rows:
        raise SceneFormatError(f"{path}: no data rows")

    anchor_ids = sorted({r[1] for r in rows if r[2] == ANCHOR_OBJECT_TYPE})
    if not anchor_ids:
        raise SceneFormatError(f"{path}: no row with OBJECT_TYPE={ANCHOR_OBJECT_TYPE!r}")
    if len(anchor_ids) > 1:
        raise SceneFormatError(f"{path}: multiple {ANCHOR_OBJECT_TYPE!r} tracks: {anchor_ids}")
    anchor_id = anchor_ids[0]

    base = np.array(sorted({r[0] for r in rows}))
    if len(base) < n_obs:
        raise SceneFormatError(f"{path}: only {len(base)} timestamps, need at least n_obs={n_obs}")
    base = base[: n_obs + n_pred]
    t0 = base[0]
    diffs = np.diff(base)
    dt = float(np.median(diffs)) if len(diffs) else 0.1
    index_of = {ts: i for i, ts in enumerate(base)}

    by_track: dict[str, list] = {}
    for ts, track_id, _, x, y in rows:
        by_track.setdefault(track_id, []).append((ts, x, y))

    agents = []
    for track_id in sorted(by_track):
        positions = np.zeros((len(base), 2))
        valid = np.zeros(len(base), dtype=bool)
        for ts, x, y in sorted(by_track[track_id]):
            i = index_of.get(ts)
            if i is None:
                continue  # beyond the truncated horizon
            positions[i] = (x, y)
            valid[i] = True
        agents.append(AgentTrack(id=track_id, timestamps=base - t0, positions=positions, valid=valid))

    anchor = next(t for t in agents if t.id == anchor_id)
    n_anchor_obs = int(np.sum(anchor.valid[:n_obs]))
    if n_anchor_obs < n_obs:
        raise SceneFormatError(
            f"{path}: anchor track {anchor_id!r} has {n_anchor_obs} of the first "
            f"{n_obs} observed steps"
        )

    scene = Scene(
        agents=tuple(agents),
        polylines=(),
        anchor_id=anchor_id,
        dt=dt,
        n_obs=n_obs,
        n_pred=max(0, len(base) - n_obs),
    )
    return scene.validate()
