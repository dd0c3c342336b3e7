"""
Tests for scenes, procedural generators and the triangle-soup format.
"""

import os
import tempfile

import numpy as np
import pytest

from dhr_shadows.errors import SceneError
from dhr_shadows.scene import (MAX_LIGHTS, SCENE_NAMES, Camera, Light, MeshAnimation, Scene, generate_scene,
                               load_triangle_soup, look_at_rotation, save_triangle_soup)


def write_soup(text):
    with tempfile.NamedTemporaryFile(mode='w', suffix='.soup', delete=False, encoding='utf-8') as f:
        f.write(text)
        return f.name


def test_generators_are_deterministic():
    for name in SCENE_NAMES:
        a = generate_scene(name)
        b = generate_scene(name)
        np.testing.assert_array_equal(a.mesh.v0, b.mesh.v0)
        assert a.lights == b.lights
    print(f"✓ {len(SCENE_NAMES)} procedural scenes are reproducible")


def test_columns_hall_seed_changes_layout():
    a = generate_scene("columns-hall", {"seed": 1})
    b = generate_scene("columns-hall", {"seed": 2})
    assert not np.array_equal(a.mesh.v0, b.mesh.v0)


def test_unknown_scene():
    with pytest.raises(SceneError) as exc_info:
        generate_scene("cathedral")
    assert "cathedral" in str(exc_info.value)


def test_too_many_lights():
    scene = generate_scene("box-room")
    lights = [Light((0.0, 3.0, float(i)), 0.1) for i in range(MAX_LIGHTS + 1)]
    with pytest.raises(SceneError):
        Scene("crowded", scene.mesh, lights)


def test_negative_light_radius():
    with pytest.raises(SceneError):
        Light((0, 0, 0), -1.0)


def test_soup_round_trip():
    scene = generate_scene("box-room")
    path = tempfile.mktemp(suffix='.soup')
    try:
        save_triangle_soup(scene, path)
        loaded = load_triangle_soup(path)
        np.testing.assert_array_equal(loaded.mesh.v0, scene.mesh.v0)
        np.testing.assert_array_equal(loaded.mesh.mesh_id, scene.mesh.mesh_id)
        np.testing.assert_array_equal(loaded.mesh.albedo, scene.mesh.albedo)
        assert loaded.lights == scene.lights
    finally:
        if os.path.exists(path):
            os.unlink(path)


def test_soup_with_comments():
    path = write_soup(
        "# a single triangle\n"
        "tris 1 lights 1\n"
        "0 0 0  1 0 0  0 1 0  3  0.5 0.5 0.5   # floor\n"
        "0 5 0  0.25  10 10 10\n"
    )
    try:
        scene = load_triangle_soup(path)
        assert len(scene.mesh) == 1
        assert scene.mesh.mesh_id[0] == 3
        assert scene.lights[0].radius == 0.25
    finally:
        os.unlink(path)


def test_soup_errors_name_the_line():
    path = write_soup("tris 1 lights 1\n0 0 0 1 0 0 0 1\n0 5 0 0.25 1 1 1\n")
    try:
        with pytest.raises(SceneError) as exc_info:
            load_triangle_soup(path)
        assert ":2:" in str(exc_info.value)
    finally:
        os.unlink(path)


def test_soup_count_mismatch():
    path = write_soup("tris 2 lights 1\n0 0 0 1 0 0 0 1 0 0 1 1 1\n0 5 0 0.25 1 1 1\n")
    try:
        with pytest.raises(SceneError):
            load_triangle_soup(path)
    finally:
        os.unlink(path)


def test_soup_file_not_found():
    with pytest.raises(FileNotFoundError) as exc_info:
        load_triangle_soup("nonexistent_scene.soup")
    assert "nonexistent_scene.soup" in str(exc_info.value)
    assert "not found" in str(exc_info.value)


def test_look_at_rotation_is_orthonormal():
    rotation = look_at_rotation((1.0, 2.0, 3.0), (0.0, 0.5, -1.0))
    np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
    forward = np.subtract((0.0, 0.5, -1.0), (1.0, 2.0, 3.0))
    np.testing.assert_allclose(rotation[2], forward / np.linalg.norm(forward))
    assert rotation[1][1] > 0


def test_look_at_straight_down():
    rotation = look_at_rotation((0.0, 5.0, 0.0), (0.0, 0.0, 0.0))
    np.testing.assert_allclose(rotation[2], [0.0, -1.0, 0.0])
    assert np.all(np.isfinite(rotation))


def test_camera_rejects_bad_orientation():
    with pytest.raises(ValueError):
        Camera(orientation=((2.0, 0, 0), (0, 1, 0), (0, 0, 1)))


def test_animation_moves_only_its_mesh():
    scene = generate_scene("box-room")
    moved = scene.animated([MeshAnimation(6, (0.0, 1.0, 0.0), (1.5, 0.0, -2.0), 10.0)], tick=3)
    assert moved is not scene
    column = scene.mesh.mesh_id == 6
    assert not np.allclose(moved.mesh.v0[column], scene.mesh.v0[column])
    np.testing.assert_array_equal(moved.mesh.v0[~column], scene.mesh.v0[~column])
    assert scene.animated([], tick=3) is scene
    assert scene.animated([MeshAnimation(6)], tick=0) is scene
