"""
Tests for shadow visibility, ambient occlusion and their reference estimators.
"""

import math
import os
import tempfile

import numpy as np
import pytest

from dhr_shadows.bvh import Triangle, TriangleMesh
from dhr_shadows.errors import DecodeError, SceneError
from dhr_shadows.gbuffer import CameraPose, GBuffer
from dhr_shadows.raytrace import (AoBuffer, cone_half_angle, load_ao_plane, reference_ao, reference_visibility,
                                  save_ao_plane, trace_ao, trace_visibility)
from dhr_shadows.sampling import SamplerState
from dhr_shadows.scene import Camera, Light, Scene

from conftest import floor_scene


def surface_patch(points, normal, mesh_ids=None, frame_id=0):
    """G-buffer whose pixels are the given world points, all sharing one normal."""
    points = np.asarray(points, dtype=np.float64)
    h, w = points.shape[:2]
    camera = Camera(resolution=(w, h))
    pose = CameraPose.looking_at(frame_id, (0.0, 10.0, 0.01), (0.0, 0.0, 0.0))
    if mesh_ids is None:
        mesh_ids = np.zeros((h, w), dtype=np.int32)
    return GBuffer.from_surface(points, np.broadcast_to(normal, points.shape), mesh_ids, pose, camera)


def floor_points():
    """Row 0 sits in the blocker's umbra, row 1 is well outside it, row 2 is background."""
    xs = [(-0.4, -0.1, 0.1, 0.4), (1.2, 1.5, 2.0, 3.0), (0.0, 0.0, 0.0, 0.0)]
    points = np.array([[(x, 0.0, 0.0) for x in row] for row in xs])
    mesh_ids = np.array([[0] * 4, [0] * 4, [-1] * 4], dtype=np.int32)
    return surface_patch(points, (0.0, 1.0, 0.0), mesh_ids)


def cube(lo, hi, mesh_id=0):
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    c = [(x, y, z) for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)]
    faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in faces:
        tris.append(Triangle(c[a], c[b], c[cc], mesh_id))
        tris.append(Triangle(c[a], c[cc], c[d], mesh_id))
    return tris


def test_hard_shadow_under_blocker():
    gbuffer = floor_points()
    vis = trace_visibility(gbuffer, floor_scene(), mode="hard")
    assert vis.light_count == 1
    assert vis.bits[0].tolist() == [0, 0, 0, 0]
    assert vis.bits[1].tolist() == [1, 1, 1, 1]
    assert vis.bits[2].tolist() == [1, 1, 1, 1]
    assert vis.pose == gbuffer.pose
    print("✓ Hard shadows: umbra dark, open floor and background lit")


def test_soft_shadow_umbra_and_lit_region():
    gbuffer = floor_points()
    vis = trace_visibility(gbuffer, floor_scene(light_radius=0.5), mode="soft", sampler=SamplerState(3))
    assert vis.mode == "soft"
    assert vis.bits[0].tolist() == [0, 0, 0, 0]
    assert vis.bits[1].tolist() == [1, 1, 1, 1]


def test_soft_mode_with_point_light_equals_hard_mode():
    gbuffer = floor_points()
    scene = floor_scene(light_radius=0.0)
    hard = trace_visibility(gbuffer, scene, mode="hard")
    soft = trace_visibility(gbuffer, scene, mode="soft", sampler=SamplerState(11))
    np.testing.assert_array_equal(hard.bits, soft.bits)


def test_penumbra_is_fractional():
    points = np.array([[(0.75, 0.0, z) for z in (-0.1, 0.0, 0.1)]])
    gbuffer = surface_patch(points, (0.0, 1.0, 0.0))
    fraction = reference_visibility(gbuffer, floor_scene(light_radius=0.5), "soft", 256, SamplerState(5))
    assert fraction.shape == (1, 3, 1)
    assert np.all((fraction > 0.1) & (fraction < 0.9))


def test_visibility_is_deterministic():
    gbuffer = floor_points()
    scene = floor_scene(light_radius=0.5)
    a = trace_visibility(gbuffer, scene, mode="soft", sampler=SamplerState(8, frame_id=2))
    b = trace_visibility(gbuffer, scene, mode="soft", sampler=SamplerState(8, frame_id=2))
    assert a == b


def test_bits_above_light_count_are_zero(box_room):
    lights = [Light((x, 3.0, -1.0), 0.0) for x in (-1.0, 0.0, 1.0)]
    gbuffer = floor_points()
    vis = trace_visibility(gbuffer, box_room, lights=lights, mode="hard")
    assert vis.light_count == 3
    assert np.all(vis.bits >> 3 == 0)
    assert vis.light_visible(0).dtype == bool


def test_too_many_lights_rejected():
    lights = [Light((0.0, 3.0, float(i)), 0.1) for i in range(9)]
    with pytest.raises(SceneError):
        trace_visibility(floor_points(), floor_scene(), lights=lights)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        trace_visibility(floor_points(), floor_scene(), mode="fuzzy")


def test_cone_half_angle():
    assert cone_half_angle(Light((0.0, 2.0, 0.0), 1.0), (0.0, 0.0, 0.0)) == pytest.approx(math.pi / 6)
    assert cone_half_angle(Light((0.0, 2.0, 0.0), 0.0), (0.0, 0.0, 0.0)) == 0.0
    assert cone_half_angle(Light((0.0, 2.0, 0.0), 5.0), (0.0, 0.0, 0.0)) == pytest.approx(math.pi / 2)
    with pytest.raises(ValueError):
        cone_half_angle(Light((0.0, 2.0, 0.0), 1.0), (0.0, 2.0, 0.0))


def test_ao_open_hemisphere_is_fully_unoccluded():
    gbuffer = floor_points()
    ao = trace_ao(gbuffer, floor_scene(blocker=False), rays=32, radius=2.0)
    assert np.all(ao.counts == 32)
    assert ao.counts.dtype == np.uint8
    np.testing.assert_array_equal(ao.occlusion_factor(), 1.0)


def test_ao_enclosed_point_is_fully_occluded():
    scene = Scene("closed", TriangleMesh.from_triangles(cube((-1, -1, -1), (1, 1, 1))),
                  [Light((0.0, 0.5, 0.0), 0.0)])
    gbuffer = surface_patch(np.zeros((2, 2, 3)), (0.0, 1.0, 0.0))
    ao = trace_ao(gbuffer, scene, rays=16, radius=5.0)
    assert np.all(ao.counts == 0)


def test_ao_background_pixels_get_full_count():
    ao = trace_ao(floor_points(), floor_scene(), rays=20, radius=1.0)
    assert np.all(ao.counts[2] == 20)


def test_corner_crease_is_half_occluded(corner_wall):
    """Next to the wall exactly half of a cosine-weighted hemisphere is blocked."""
    points = np.array([[(1e-3, 0.0, z) for z in np.linspace(-1.0, 1.0, 4)] for _ in range(4)])
    gbuffer = surface_patch(points, (0.0, 1.0, 0.0))
    unoccluded = reference_ao(gbuffer, corner_wall, rays=64, radius=100.0, samples=16, sampler=SamplerState(2))
    assert abs(unoccluded.mean() - 0.5) < 0.02
    print(f"✓ Corner AO {unoccluded.mean():.3f} (expected 0.5)")


def test_larger_radius_never_sees_more_sky(corner_wall):
    points = np.array([[(x, 0.0, 0.0) for x in (0.05, 0.2, 0.5, 1.0)]])
    gbuffer = surface_patch(points, (0.0, 1.0, 0.0))
    small = trace_ao(gbuffer, corner_wall, rays=64, radius=0.1)
    large = trace_ao(gbuffer, corner_wall, rays=64, radius=10.0)
    assert np.all(large.counts <= small.counts)
    # The wall is farther than 0.1 from every point but the first.
    assert np.all(small.counts[0, 1:] == 64)
    assert large.counts[0, 3] < 64


def test_ao_argument_ranges():
    gbuffer = floor_points()
    scene = floor_scene()
    for rays in (0, 256):
        with pytest.raises(ValueError):
            trace_ao(gbuffer, scene, rays=rays, radius=1.0)
    with pytest.raises(ValueError):
        trace_ao(gbuffer, scene, rays=8, radius=0.0)


def test_single_sample_reference_equals_server_trace():
    gbuffer = floor_points()
    scene = floor_scene(light_radius=0.5)
    sampler = SamplerState(4, frame_id=gbuffer.frame_id)
    vis = trace_visibility(gbuffer, scene, mode="soft", sampler=sampler)
    ref_vis = reference_visibility(gbuffer, scene, "soft", 1, sampler)
    np.testing.assert_array_equal(ref_vis[..., 0], vis.light_visible(0).astype(float))

    ao = trace_ao(gbuffer, scene, rays=16, radius=1.5, sampler=sampler)
    ref_ao = reference_ao(gbuffer, scene, rays=16, radius=1.5, samples=1, sampler=sampler)
    np.testing.assert_array_equal(ref_ao, ao.occlusion_factor())


def test_ao_plane_file_round_trip():
    gbuffer = floor_points()
    ao = trace_ao(gbuffer, floor_scene(), rays=24, radius=0.75)
    path = tempfile.mktemp(suffix='.ao')
    try:
        save_ao_plane(ao, path)
        loaded = load_ao_plane(path, gbuffer.pose)
        assert loaded == ao
        assert loaded.radius == ao.radius
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(b"NOPE" + data[4:])
        with pytest.raises(DecodeError):
            load_ao_plane(path, gbuffer.pose)
        with open(path, "wb") as f:
            f.write(data[:-1])
        with pytest.raises(DecodeError):
            load_ao_plane(path, gbuffer.pose)
    finally:
        if os.path.exists(path):
            os.unlink(path)
    with pytest.raises(FileNotFoundError) as exc_info:
        load_ao_plane("missing.ao", gbuffer.pose)
    assert "not found" in str(exc_info.value)


def test_radius_is_rounded_for_the_wire():
    pose = CameraPose(0, (0.0, 0.0, 0.0), ((1, 0, 0), (0, 1, 0), (0, 0, -1)))
    ao = AoBuffer(np.zeros((2, 2), dtype=np.uint8), 8, 0.1, pose)
    assert ao.radius == float(np.float32(0.1))
