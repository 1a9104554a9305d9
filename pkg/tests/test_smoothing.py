"""Bidirectional kinematic smoothing."""

import numpy as np
import pytest

from trajcast.scene import AgentTrack, Polyline, Scene, Se2Transform, apply_se2
from trajcast.smoothing import (
    KinematicState,
    SmootherParams,
    UnusableTrackError,
    kalman_smooth,
    smooth_scene,
)


def line_track(n=20, dt=0.1, vel=(1.0, 0.0), start=(0.0, 0.0), valid=None, noise=None, seed=0):
    t = np.arange(n) * dt
    pos = np.asarray(start) + t[:, None] * np.asarray(vel)
    if noise:
        pos = pos + np.random.default_rng(seed).normal(0.0, noise, size=pos.shape)
    if valid is None:
        valid = np.ones(n, dtype=bool)
    return AgentTrack(id="x", timestamps=t, positions=pos, valid=valid)


class TestKalmanSmooth:
    def test_constant_velocity_recovered(self):
        track = line_track(n=20)
        states = kalman_smooth(track, 0.1)
        for s in states[1:-1]:
            np.testing.assert_allclose(s.velocity, [1.0, 0.0], atol=1e-3)

    def test_noiseless_positions_kept(self):
        track = line_track(n=20)
        states = kalman_smooth(track, 0.1)
        for s, p in zip(states, track.positions):
            np.testing.assert_allclose(s.position, p, atol=1e-2)

    def test_missing_step_interpolated(self):
        valid = np.ones(20, dtype=bool)
        valid[10] = False
        track = line_track(n=20, valid=valid)
        states = kalman_smooth(track, 0.1)
        expected = 0.5 * (track.positions[9] + track.positions[11])
        np.testing.assert_allclose(states[10].position, expected, atol=1e-2)

    def test_constant_acceleration_model_exact(self):
        n, dt = 40, 0.1
        t = np.arange(n) * dt
        accel = np.array([0.6, -0.4])
        v0 = np.array([2.0, 1.0])
        p0 = np.array([5.0, -3.0])
        pos = p0 + v0 * t[:, None] + 0.5 * accel * t[:, None] ** 2
        track = AgentTrack(id="x", timestamps=t, positions=pos, valid=np.ones(n, dtype=bool))
        states = kalman_smooth(track, dt)
        for s, ti in zip(states, t):
            np.testing.assert_allclose(s.position, p0 + v0 * ti + 0.5 * accel * ti**2, atol=1e-6)
            np.testing.assert_allclose(s.velocity, v0 + accel * ti, atol=1e-6)
            np.testing.assert_allclose(s.acceleration, accel, atol=1e-6)

    def test_commutes_with_rigid_transform(self):
        track = line_track(n=20, vel=(2.0, 0.5), noise=0.3)
        transform = Se2Transform(0.9, (4.0, -7.0))
        moved = AgentTrack(
            id="x", timestamps=track.timestamps,
            positions=transform.apply(track.positions), valid=track.valid,
        )
        direct = kalman_smooth(moved, 0.1)
        routed = kalman_smooth(track, 0.1)
        for d, r in zip(direct, routed):
            np.testing.assert_allclose(d.position, transform.apply(r.position[None])[0], atol=1e-6)
            np.testing.assert_allclose(d.velocity, transform.rotate(r.velocity[None])[0], atol=1e-6)

    def test_too_few_valid_steps_rejected(self):
        valid = np.zeros(20, dtype=bool)
        valid[3] = True
        with pytest.raises(UnusableTrackError):
            kalman_smooth(line_track(n=20, valid=valid), 0.1)

    def test_covariances_positive_semidefinite(self):
        track = line_track(n=20, noise=0.3)
        for s in kalman_smooth(track, 0.1):
            eigvals = np.linalg.eigvalsh(s.covariance)
            assert eigvals.min() > -1e-9

    def test_uneven_timestamps_use_actual_gaps(self):
        t = np.array([0.0, 0.1, 0.2, 0.5, 0.6, 0.7, 0.8, 0.9])
        pos = np.column_stack([2.0 * t, np.zeros_like(t)])
        track = AgentTrack(id="x", timestamps=t, positions=pos, valid=np.ones(len(t), dtype=bool))
        states = kalman_smooth(track, 0.1)
        for s in states[1:-1]:
            np.testing.assert_allclose(s.velocity, [2.0, 0.0], atol=1e-3)


class TestKinematicState:
    def test_asymmetric_covariance_rejected(self):
        cov = np.eye(6)
        cov[0, 1] = 0.5
        with pytest.raises(ValueError):
            KinematicState(
                position=np.zeros(2), velocity=np.zeros(2),
                acceleration=np.zeros(2), covariance=cov,
            )

    def test_negative_variance_rejected(self):
        cov = np.eye(6)
        cov[2, 2] = -1.0
        with pytest.raises(ValueError):
            KinematicState(
                position=np.zeros(2), velocity=np.zeros(2),
                acceleration=np.zeros(2), covariance=cov,
            )


def two_track_scene(n_obs=20, n_pred=30, drop_other=False):
    n = n_obs + n_pred
    t = np.arange(n) * 0.1
    anchor = AgentTrack(
        id="agent", timestamps=t,
        positions=np.column_stack([3.0 * t, np.zeros_like(t)]),
        valid=np.ones(n, dtype=bool),
    )
    other_valid = np.ones(n, dtype=bool)
    if drop_other:
        other_valid[: n_obs - 1] = False  # a single valid observed step
    other = AgentTrack(
        id="other", timestamps=t,
        positions=np.column_stack([np.zeros_like(t), 2.0 * t]),
        valid=other_valid,
    )
    return Scene(
        agents=(anchor, other),
        polylines=(Polyline(points=np.array([[0.0, 0.0], [20.0, 0.0]])),),
        anchor_id="agent", dt=0.1, n_obs=n_obs, n_pred=n_pred,
    ).validate()


class TestSmoothScene:
    def test_future_velocities_from_differences(self):
        scene = two_track_scene()
        out = smooth_scene(scene)
        anchor = out.anchor
        n_obs, dt = scene.n_obs, scene.dt
        for k in range(n_obs, len(anchor)):
            prev = anchor.positions[k - 1]
            np.testing.assert_allclose(
                anchor.velocities[k], (anchor.positions[k] - prev) / dt, atol=1e-9
            )

    def test_observed_velocities_smoothed(self):
        scene = two_track_scene()
        out = smooth_scene(scene)
        np.testing.assert_allclose(out.anchor.velocities[5], [3.0, 0.0], atol=1e-3)

    def test_unusable_other_track_dropped(self):
        scene = two_track_scene(drop_other=True)
        out = smooth_scene(scene)
        assert [a.id for a in out.agents] == ["agent"]

    def test_unusable_anchor_raises(self):
        scene = two_track_scene()
        valid = scene.anchor.valid.copy()
        valid[: scene.n_obs - 1] = False
        from dataclasses import replace

        bad = replace(scene, agents=(replace(scene.anchor, valid=valid), scene.agents[1]))
        with pytest.raises(UnusableTrackError):
            smooth_scene(bad)
