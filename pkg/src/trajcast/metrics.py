"""Forecast quality metrics and dataset evaluation.

Scalar metrics follow the usual multi-modal conventions: minFDE is the best
endpoint error over modes, minADE is the average displacement of that same
best-endpoint mode, a miss is a minFDE above 2 m, and drivable-area
compliance is the fraction of mode trajectories that stay inside some lane
corridor at every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover - hard dependency, declared in the package
    jsonschema = None

MISS_THRESHOLD = 2.0  # metres of endpoint error


def endpoint_errors(trajectories: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Final-step distance of each mode. trajectories: (I, T, 2); gt: (T, 2)."""
    if trajectories.shape[1] != len(gt):
        raise ValueError(
            f"mode length {trajectories.shape[1]} does not match ground truth {len(gt)}"
        )
    return np.linalg.norm(trajectories[:, -1] - gt[-1], axis=-1)


def best_mode_index(trajectories: np.ndarray, gt: np.ndarray) -> int:
    return int(np.argmin(endpoint_errors(trajectories, gt)))


def min_fde(trajectories: np.ndarray, gt: np.ndarray) -> float:
    return float(endpoint_errors(trajectories, gt).min())


def min_ade(trajectories: np.ndarray, gt: np.ndarray) -> float:
    """Average displacement of the mode with the smallest endpoint error.

    Deliberately not the minimum average displacement over modes: the mode is
    picked by endpoint, then its full-horizon average error is reported.
    """
    best = best_mode_index(trajectories, gt)
    return float(np.linalg.norm(trajectories[best] - gt, axis=-1).mean())


def point_to_polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest segment of a polyline.

    points: (M, 2); polyline: (P, 2) with P >= 2 -> (M,).
    """
    a = polyline[:-1]  # (S, 2)
    ab = polyline[1:] - a  # (S, 2)
    ap = points[:, None, :] - a[None, :, :]  # (M, S, 2)
    denom = np.maximum((ab * ab).sum(-1), 1e-18)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)  # (M, S)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1).min(axis=1)


def on_road_fraction(
    trajectories: np.ndarray,
    polylines: list[np.ndarray],
    half_widths: np.ndarray,
) -> float:
    """Fraction of modes whose every point lies within some lane corridor."""
    n_modes = trajectories.shape[0]
    if not polylines:
        raise ValueError("on-road compliance needs at least one polyline")
    compliant = 0
    for i in range(n_modes):
        pts = trajectories[i]
        inside = np.zeros(len(pts), dtype=bool)
        for poly, hw in zip(polylines, half_widths):
            inside |= point_to_polyline_distance(pts, poly) <= hw
            if inside.all():
                break
        compliant += bool(inside.all())
    return compliant / n_modes


@dataclass(frozen=True)
class SceneMetrics:
    scene_id: str
    min_ade: float
    min_fde: float
    missed: bool
    dac: float | None  # None when the scene has no polylines


@dataclass(frozen=True)
class MetricReport:
    n_scenes: int
    min_ade: float
    min_fde: float
    miss_rate: float
    dac: float | None
    scenes: tuple[SceneMetrics, ...] = ()


def score_scene(
    scene_id: str,
    trajectories: np.ndarray,
    gt: np.ndarray,
    polylines: list[np.ndarray],
    half_widths: np.ndarray,
) -> SceneMetrics:
    fde = min_fde(trajectories, gt)
    return SceneMetrics(
        scene_id=scene_id,
        min_ade=min_ade(trajectories, gt),
        min_fde=fde,
        missed=fde > MISS_THRESHOLD,
        dac=on_road_fraction(trajectories, polylines, half_widths) if polylines else None,
    )


def aggregate(scenes: list[SceneMetrics]) -> MetricReport:
    if not scenes:
        raise ValueError("cannot aggregate an empty metric list")
    dac_values = [s.dac for s in scenes if s.dac is not None]
    return MetricReport(
        n_scenes=len(scenes),
        min_ade=float(np.mean([s.min_ade for s in scenes])),
        min_fde=float(np.mean([s.min_fde for s in scenes])),
        miss_rate=float(np.mean([s.missed for s in scenes])),
        dac=float(np.mean(dac_values)) if dac_values else None,
        scenes=tuple(scenes),
    )


def evaluate_model(model, prepared, batch_size: int = 32, variant: str = "full") -> MetricReport:
    """Score a model over prepared scenes; skips scenes without a complete
    anchor future."""
    from .features import collate
    from .model import predict

    rows: list[SceneMetrics] = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start : start + batch_size]
        batch = collate(chunk)
        preds = predict(model, batch, variant=variant)
        for i, p in enumerate(chunk):
            if not p.target_valid[p.anchor_index].all():
                continue
            gt = p.target_pos[p.anchor_index]
            rows.append(
                score_scene(
                    p.scene_id,
                    preds.trajectories[i],
                    gt,
                    p.raw_polylines or [],
                    p.raw_half_widths if p.raw_half_widths is not None else np.zeros(0),
                )
            )
    return aggregate(rows)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_scenes", "min_ade", "min_fde", "miss_rate", "dac", "scenes"],
    "additionalProperties": False,
    "properties": {
        "n_scenes": {"type": "integer", "minimum": 1},
        "min_ade": {"type": "number", "minimum": 0},
        "min_fde": {"type": "number", "minimum": 0},
        "miss_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "dac": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene_id", "min_ade", "min_fde", "missed", "dac"],
                "additionalProperties": False,
                "properties": {
                    "scene_id": {"type": "string"},
                    "min_ade": {"type": "number", "minimum": 0},
                    "min_fde": {"type": "number", "minimum": 0},
                    "missed": {"type": "boolean"},
                    "dac": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}


def report_to_dict(report: MetricReport) -> dict:
    return {
        "n_scenes": report.n_scenes,
        "min_ade": report.min_ade,
        "min_fde": report.min_fde,
        "miss_rate": report.miss_rate,
        "dac": report.dac,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "min_ade": s.min_ade,
                "min_fde": s.min_fde,
                "missed": s.missed,
                "dac": s.dac,
            }
            for s in report.scenes
        ],
    }


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def save_report(report: MetricReport, path) -> None:
    doc = report_to_dict(report)
    validate_report(doc)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
