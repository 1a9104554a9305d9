"""Bidirectional Kalman smoothing of agent tracks.

A forward constant-acceleration filter followed by an RTS backward pass fills
velocity and acceleration estimates at every step and interpolates positions
where observations are missing. State ordering is [x, y, vx, vy, ax, ay];
process noise enters as white jerk.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene import AgentTrack, Scene, SceneError

_POS = slice(0, 2)
_VEL = slice(2, 4)
_ACC = slice(4, 6)
_INIT_VAR = 1e6  # diffuse prior so a handful of observations dominates


class UnusableTrackError(SceneError):
    """Track has too few valid observations to smooth."""


@dataclass(frozen=True)
class SmootherParams:
    meas_sigma: float = 0.3  # m, observation noise
    jerk_sigma: float = 2.0  # m/s^3, process noise


@dataclass(frozen=True, eq=False)
class KinematicState:
    """Smoothed planar state with a 6x6 covariance."""

    position: np.ndarray  # (2,)
    velocity: np.ndarray  # (2,)
    acceleration: np.ndarray  # (2,)
    covariance: np.ndarray  # (6, 6)

    def __post_init__(self):
        cov = 0.5 * (self.covariance + self.covariance.T)
        if np.max(np.abs(cov - self.covariance)) > 1e-9:
            raise ValueError("covariance not symmetric")
        if np.any(np.diag(cov) < -1e-12):
            raise ValueError("covariance has negative diagonal")
        object.__setattr__(self, "covariance", cov)


def _transition(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State transition and jerk-driven process noise for one step."""
    F = np.eye(6)
    F[0, 2] = F[1, 3] = F[2, 4] = F[3, 5] = dt
    F[0, 4] = F[1, 5] = 0.5 * dt * dt
    g = np.array([dt**3 / 6.0, dt**2 / 2.0, dt])
    q = np.outer(g, g)
    Q = np.zeros((6, 6))
    for axis in (0, 1):
        idx = np.array([axis, axis + 2, axis + 4])
        Q[np.ix_(idx, idx)] = q
    return F, Q


def kalman_smooth(
    track: AgentTrack, dt: float, params: SmootherParams = SmootherParams()
) -> list[KinematicState]:
    """Run the forward filter and RTS backward pass over one track.

    Missing steps (valid=False) are filled by state propagation; every step of
    the returned sequence carries position, velocity and acceleration.

    Raises:
        UnusableTrackError: fewer than 2 valid observations.
    """
    n = len(track)
    valid = track.valid
    if int(valid.sum()) < 2:
        raise UnusableTrackError(f"track {track.id!r}: {int(valid.sum())} valid observations, need >= 2")

    steps = np.diff(track.timestamps)
    steps = np.maximum(steps, 1e-6)
    H = np.zeros((2, 6))
    H[0, 0] = H[1, 1] = 1.0
    R = params.meas_sigma**2 * np.eye(2)
    jerk_var = params.jerk_sigma**2

    first = int(np.argmax(valid))
    x = np.zeros(6)
    x[_POS] = track.positions[first]
    P = _INIT_VAR * np.eye(6)

    xs_filt = np.zeros((n, 6))
    Ps_filt = np.zeros((n, 6, 6))
    xs_pred = np.zeros((n, 6))
    Ps_pred = np.zeros((n, 6, 6))
    Fs = np.zeros((n, 6, 6))
    Fs[0] = np.eye(6)

    for k in range(n):
        if k > 0:
            F, Q = _transition(float(steps[k - 1]))
            Fs[k] = F
            x = F @ x
            P = F @ P @ F.T + jerk_var * Q
        xs_pred[k] = x
        Ps_pred[k] = P
        if valid[k]:
            z = track.positions[k]
            S = H @ P @ H.T + R
            K = P @ H.T @ np.linalg.inv(S)
            x = x + K @ (z - H @ x)
            IKH = np.eye(6) - K @ H
            P = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form keeps P symmetric PSD
        xs_filt[k] = x
        Ps_filt[k] = P

    # RTS backward pass
    xs = xs_filt.copy()
    Ps = Ps_filt.copy()
    for k in range(n - 2, -1, -1):
        C = Ps_filt[k] @ Fs[k + 1].T @ np.linalg.inv(Ps_pred[k + 1])
        xs[k] = xs_filt[k] + C @ (xs[k + 1] - xs_pred[k + 1])
        Ps[k] = Ps_filt[k] + C @ (Ps[k + 1] - Ps_pred[k + 1]) @ C.T

    return [
        KinematicState(
            position=xs[k, _POS].copy(),
            velocity=xs[k, _VEL].copy(),
            acceleration=xs[k, _ACC].copy(),
            covariance=0.5 * (Ps[k] + Ps[k].T),
        )
        for k in range(n)
    ]


def smooth_scene(scene: Scene, params: SmootherParams = SmootherParams()) -> Scene:
    """Smooth the observed segment of every track in the scene.

    Observed positions are replaced by their smoothed estimates (missing steps
    interpolated); velocity and acceleration fields are filled, with future
    steps using ground-truth finite differences. Non-anchor tracks with fewer
    than 2 valid observations are dropped; an unusable anchor raises.
    """
    n_obs = scene.n_obs
    kept = []
    for track in scene.agents:
        obs = replace(
            track,
            timestamps=track.timestamps[:n_obs],
            positions=track.positions[:n_obs],
            valid=track.valid[:n_obs],
            velocities=None,
            accelerations=None,
        )
        try:
            states = kalman_smooth(obs, scene.dt, params)
        except UnusableTrackError:
            if track.id == scene.anchor_id:
                raise
            continue

        positions = track.positions.copy()
        velocities = np.zeros_like(positions)
        accelerations = np.zeros_like(positions)
        positions[:n_obs] = [s.position for s in states]
        velocities[:n_obs] = [s.velocity for s in states]
        accelerations[:n_obs] = [s.acceleration for s in states]
        if len(track) > n_obs:
            fut = track.positions[n_obs:]
            prev = np.vstack([positions[n_obs - 1], fut[:-1]])
            velocities[n_obs:] = (fut - prev) / scene.dt
            dv = np.vstack([velocities[n_obs] - velocities[n_obs - 1], np.diff(velocities[n_obs:], axis=0)])
            accelerations[n_obs:] = dv / scene.dt
        kept.append(
            replace(track, positions=positions, velocities=velocities, accelerations=accelerations)
        )
    return replace(scene, agents=tuple(kept))
