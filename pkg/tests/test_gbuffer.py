"""
Tests for camera poses, rasterization, motion vectors and the G-buffer dump format.
"""

import math
import os
import tempfile

import numpy as np
import pytest

from dhr_shadows.bvh import intersect_batch
from dhr_shadows.errors import DecodeError, DimensionMismatchError
from dhr_shadows.gbuffer import (CameraPose, compute_motion, dump_gbuffer, load_gbuffer, pixel_grid,
                                 primary_rays, project_points, rasterize)
from dhr_shadows.scene import Camera

from conftest import plane_gbuffer


def test_pose_float_round_trip_is_exact():
    pose = CameraPose.looking_at(7, (0.1, 2.3, 4.7), (0.0, 1.0, -1.5))
    again = CameraPose.from_floats(7, pose.to_floats())
    assert again == pose
    assert again.same_view(pose.with_frame(8))
    assert again != pose.with_frame(8)


def test_rasterize_matches_primary_ray_oracle(box_room):
    camera = Camera(resolution=(40, 24))
    pose = CameraPose.looking_at(0, (0.0, 2.0, 3.5), (0.0, 1.0, -1.5))
    gbuffer = rasterize(box_room, camera, pose)
    origin, dirs = primary_rays(pose, camera)
    _, prim = intersect_batch(box_room.bvh, np.broadcast_to(origin, dirs.shape), dirs)
    expected = np.where(prim >= 0, box_room.mesh.mesh_id[prim], -1).reshape(24, 40)
    np.testing.assert_array_equal(gbuffer.mesh_id, expected)
    assert gbuffer.valid.all()
    print("✓ G-buffer mesh ids match the primary-ray oracle")


def test_normals_face_the_camera(box_room):
    camera = Camera(resolution=(32, 18))
    pose = CameraPose.looking_at(0, (0.0, 2.0, 3.5), (0.0, 1.0, -1.5))
    gbuffer = rasterize(box_room, camera, pose)
    _, dirs = primary_rays(pose, camera)
    facing = np.einsum("ij,ij->i", gbuffer.normal.reshape(-1, 3), dirs)
    assert np.all(facing[gbuffer.valid.reshape(-1)] <= 0)


def test_projection_lands_on_pixel_centers(plane):
    sx, sy, z = project_points(plane.world_pos.reshape(-1, 3), plane.pose, plane.camera)
    xs, ys = pixel_grid(plane.shape)
    np.testing.assert_allclose(sx, xs.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(sy, ys.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(z, 5.0)
    np.testing.assert_allclose(plane.depth, 5.0)


def test_background_pixels(box_room):
    camera = Camera(resolution=(16, 9))
    pose = CameraPose.looking_at(0, (0.0, 2.0, 20.0), (0.0, 2.0, 40.0))
    gbuffer = rasterize(box_room, camera, pose)
    assert not gbuffer.valid.any()
    assert np.all(np.isinf(gbuffer.depth))
    assert np.all(np.isnan(gbuffer.world_pos))


def test_motion_is_zero_for_a_static_camera(plane):
    moved = compute_motion(plane, plane.pose.with_frame(99))
    assert np.all(moved.motion == 0)


def test_motion_points_to_previous_position():
    current = plane_gbuffer(width=20, height=10, frame_id=1)
    prev = CameraPose(0, (0.5, 0.0, 0.0), current.pose.orientation)
    moved = compute_motion(current, prev)
    sx, sy, _ = project_points(current.world_pos.reshape(-1, 3), prev, current.camera)
    xs, ys = pixel_grid(current.shape)
    np.testing.assert_allclose(moved.motion[..., 0].reshape(-1), sx - xs.reshape(-1))
    # The previous camera sat to the right, so every point appeared further left.
    assert np.all(moved.motion[..., 0] < 0)


def test_dump_round_trip(box_room):
    camera = Camera(resolution=(24, 16), vertical_fov=math.radians(60))
    pose = CameraPose.looking_at(3, (0.0, 2.0, 3.5), (0.0, 1.0, -1.5))
    gbuffer = rasterize(box_room, camera, pose)
    path = tempfile.mktemp(suffix='.gbuf')
    try:
        dump_gbuffer(gbuffer, path)
        loaded = load_gbuffer(path, camera)
        assert loaded.pose == pose
        np.testing.assert_array_equal(loaded.mesh_id, gbuffer.mesh_id)
        np.testing.assert_allclose(loaded.depth, gbuffer.depth, rtol=1e-6)
        np.testing.assert_allclose(loaded.normal, gbuffer.normal, atol=1e-6)
    finally:
        if os.path.exists(path):
            os.unlink(path)


def test_dump_errors(plane):
    path = tempfile.mktemp(suffix='.gbuf')
    try:
        dump_gbuffer(plane, path)
        with pytest.raises(DimensionMismatchError):
            load_gbuffer(path, Camera(resolution=(8, 8)))
        with open(path, "rb") as f:
            original = f.read()
        with open(path, "wb") as f:
            f.write(b"XXXX" + original[4:])
        with pytest.raises(DecodeError):
            load_gbuffer(path, plane.camera)
        with open(path, "wb") as f:
            f.write(original[:100])
        with pytest.raises(DecodeError):
            load_gbuffer(path, plane.camera)
    finally:
        if os.path.exists(path):
            os.unlink(path)
    with pytest.raises(FileNotFoundError):
        load_gbuffer("missing.gbuf", plane.camera)


def test_view_projection_is_invertible():
    pose = CameraPose.looking_at(0, (1.0, 2.0, 3.0), (0.0, 0.0, 0.0))
    vp = pose.view_projection(Camera())
    assert abs(np.linalg.det(vp)) > 1e-9
