"""
Tests for scripted camera trajectories.
"""

import numpy as np
import pytest

from dhr_shadows.gbuffer import CameraPose
from dhr_shadows.trajectory import (STANDARD_PATH, STANDARD_TARGET, Keyframe, Trajectory, standard_trajectory,
                                    static_trajectory)


def test_endpoints_hit_the_keyframes():
    trajectory = standard_trajectory(ticks=301)
    first = trajectory.pose(0)
    last = trajectory.pose(300)
    np.testing.assert_allclose(first.position, STANDARD_PATH[0][1], atol=1e-6)
    np.testing.assert_allclose(last.position, STANDARD_PATH[-1][1], atol=1e-6)
    expected = CameraPose.looking_at(0, STANDARD_PATH[0][1], STANDARD_TARGET)
    np.testing.assert_allclose(first.orientation, expected.orientation, atol=1e-6)


def test_out_of_range_ticks_clamp():
    trajectory = standard_trajectory(ticks=60)
    assert trajectory.pose(-10).same_view(trajectory.pose(0))
    assert trajectory.pose(1000).same_view(trajectory.pose(59))
    assert trajectory.pose(1000).frame_id == 1000


def test_every_pose_is_a_valid_camera_basis():
    for pose in standard_trajectory(ticks=40).poses():
        m = pose.orientation.astype(np.float64)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-5)
        assert np.linalg.det(m) == pytest.approx(-1.0, abs=1e-5)


def test_poses_are_numbered_by_tick():
    poses = standard_trajectory(ticks=12).poses()
    assert [p.frame_id for p in poses] == list(range(12))


def test_timing():
    trajectory = standard_trajectory(ticks=300, tick_rate=60.0)
    assert trajectory.tick_ms == pytest.approx(1000.0 / 60.0)
    assert trajectory.duration_s == pytest.approx(5.0)
    assert trajectory.time_ms(30) == pytest.approx(500.0)


def test_short_runs_collapse_keyframes():
    for ticks in (1, 2, 3):
        trajectory = standard_trajectory(ticks=ticks)
        assert trajectory.ticks == ticks
        assert len(trajectory.poses()) == ticks


def test_keyframe_ticks_must_increase():
    with pytest.raises(ValueError):
        Trajectory([Keyframe(5, (0, 0, 1), (0, 0, 0)), Keyframe(5, (1, 0, 1), (0, 0, 0))])
    with pytest.raises(ValueError):
        Trajectory([])
    with pytest.raises(ValueError):
        Trajectory([Keyframe(0, (0, 0, 1), (0, 0, 0))], tick_rate=0.0)


def test_dict_round_trip():
    trajectory = standard_trajectory(ticks=50, tick_rate=30.0)
    again = Trajectory.from_dict(trajectory.to_dict())
    assert again.ticks == 50 and again.tick_rate == 30.0
    for tick in (0, 17, 49):
        assert again.pose(tick) == trajectory.pose(tick)


def test_static_trajectory_never_moves():
    trajectory = static_trajectory((0.0, 2.0, 3.5), (0.0, 1.0, -1.5), ticks=10)
    poses = trajectory.poses()
    assert all(p.same_view(poses[0]) for p in poses)
    assert poses[0] == CameraPose.looking_at(0, (0.0, 2.0, 3.5), (0.0, 1.0, -1.5))
