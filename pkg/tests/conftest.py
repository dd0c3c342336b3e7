"""
Shared fixtures for the dhr_shadows tests.
"""

import math
import os
import sys

import numpy as np
import pytest

# Add the parent directory to the path so we can import dhr_shadows and the CLIs
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dhr_shadows.bvh import Triangle, TriangleMesh
from dhr_shadows.config import parse_config
from dhr_shadows.gbuffer import CameraPose, GBuffer
from dhr_shadows.scene import Camera, Light, Scene, generate_scene


def plane_gbuffer(width=16, height=12, depth=5.0, frame_id=0, mesh_id=0):
    """A camera looking down -z at the plane z = -depth, every pixel covered."""
    camera = Camera(resolution=(width, height))
    pose = CameraPose(frame_id, (0.0, 0.0, 0.0), camera.orientation)
    tan = camera.tan_half_fov
    xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * tan * camera.aspect * depth
    ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * tan * depth
    gx, gy = np.meshgrid(xs, ys)
    world = np.stack([gx, gy, np.full_like(gx, -depth)], axis=-1)
    normal = np.broadcast_to([0.0, 0.0, 1.0], world.shape)
    return GBuffer.from_surface(world, normal, np.full((height, width), mesh_id, dtype=np.int32), pose, camera)


def floor_scene(light_radius=0.0, blocker=True):
    """A large floor at y = 0, an optional small square blocker at y = 1, one light above."""
    tris = [
        Triangle((-50, 0, -50), (-50, 0, 50), (50, 0, 50), 0),
        Triangle((-50, 0, -50), (50, 0, 50), (50, 0, -50), 0),
    ]
    if blocker:
        tris += [
            Triangle((-0.5, 1, -0.5), (-0.5, 1, 0.5), (0.5, 1, 0.5), 1),
            Triangle((-0.5, 1, -0.5), (0.5, 1, 0.5), (0.5, 1, -0.5), 1),
        ]
    return Scene("floor", TriangleMesh.from_triangles(tris), [Light((0.0, 3.0, 0.0), light_radius)])


@pytest.fixture
def plane():
    return plane_gbuffer()


@pytest.fixture(scope="session")
def box_room():
    return generate_scene("box-room")


@pytest.fixture(scope="session")
def corner_wall():
    return generate_scene("corner-wall")


@pytest.fixture
def tiny_config():
    """A short, low-resolution run so pipeline tests stay fast."""
    return parse_config({
        "camera": {"width": 48, "height": 27},
        "ao": {"rays": 8},
        "filter": {"iterations": 2},
        "trajectory": {"ticks": 8},
    })


@pytest.fixture
def down_camera():
    """Camera 2 units above the origin looking straight down."""
    return Camera.looking_at((0.0, 2.0, 0.0), (0.0, 0.0, 0.0), math.radians(60.0), (16, 16),
                             up_hint=(0.0, 0.0, -1.0))
