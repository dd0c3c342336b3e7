"""
Scene Module

This module provides the Scene container (triangles, area lights and the BVH
built over them), the Camera intrinsics, the procedural scene generators that
stand in for production assets, rigid per-mesh animation, and the
triangle-soup text format.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bvh import Bvh, Ray, Triangle, TriangleMesh, build_bvh
from .errors import SceneError

logger = logging.getLogger(__name__)

MAX_LIGHTS = 8
SCENE_NAMES = ("box-room", "columns-hall", "corner-wall")

__all__ = [
    "Camera", "Light", "MeshAnimation", "Ray", "Scene", "Triangle", "SCENE_NAMES",
    "generate_scene", "load_triangle_soup", "save_triangle_soup", "look_at_rotation",
]


@dataclass(frozen=True)
class Light:
    """
    Spherical area light. A radius of 0 is a point light (hard shadows only).
    """

    center: Tuple[float, float, float]
    radius: float = 0.0
    intensity: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.radius < 0:
            raise SceneError(f"light radius must be >= 0, got {self.radius}")
        if min(self.intensity) < 0:
            raise SceneError(f"light intensity must be >= 0, got {self.intensity}")


def look_at_rotation(position, target, up_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """
    Build an orthonormal orientation whose rows are (right, up, forward).

    Args:
        position: eye position
        target: point the camera looks at
        up_hint: approximate up direction; replaced when parallel to forward

    Returns:
        (3, 3) float64 rotation matrix
    """
    forward = np.subtract(target, position).astype(np.float64)
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera target coincides with its position")
    forward /= norm
    up_hint = np.asarray(up_hint, dtype=np.float64)
    if abs(np.dot(forward, up_hint)) > 0.999:
        up_hint = np.array([0.0, 0.0, -1.0]) if abs(forward[2]) < 0.999 else np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.stack([right, up, forward])


@dataclass(frozen=True)
class Camera:
    """
    Pinhole camera: default placement plus intrinsics.

    Rows of `orientation` are (right, up, forward). Per-frame placement is
    carried by gbuffer.CameraPose; the intrinsics (field of view and
    resolution) are shared by every pose rendered through this camera.
    """

    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, -1.0))
    vertical_fov: float = math.radians(60.0)
    resolution: Tuple[int, int] = (320, 180)

    def __post_init__(self):
        basis = np.asarray(self.orientation, dtype=np.float64)
        if basis.shape != (3, 3) or not np.allclose(basis @ basis.T, np.eye(3), atol=1e-6):
            raise ValueError("camera orientation must be an orthonormal 3x3 basis")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError(f"vertical_fov must be in (0, pi), got {self.vertical_fov}")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")

    @classmethod
    def looking_at(cls, position, target, vertical_fov=math.radians(60.0),
                   resolution=(320, 180), up_hint=(0.0, 1.0, 0.0)) -> "Camera":
        rotation = look_at_rotation(position, target, up_hint)
        return cls(tuple(map(float, position)), tuple(tuple(map(float, row)) for row in rotation),
                   float(vertical_fov), (int(resolution[0]), int(resolution[1])))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def aspect(self) -> float:
        return self.width / self.height

    @property
    def tan_half_fov(self) -> float:
        return math.tan(self.vertical_fov / 2.0)


@dataclass(frozen=True)
class MeshAnimation:
    """Rigid rotation of one mesh about a pivot, advancing every tick."""

    mesh_id: int
    axis: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    pivot: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    degrees_per_tick: float = 1.0


class Scene:
    """
    Immutable scene: triangles, lights and the BVH over the triangles.

    Attributes:
        name: generator or file name the scene came from
        mesh: TriangleMesh with all geometry
        lights: tuple of Light (at most 8)
        bvh: Bvh over `mesh`
        default_camera: suggested viewpoint for this scene
    """

    def __init__(self, name: str, mesh: TriangleMesh, lights: Sequence[Light],
                 default_camera: Optional[Camera] = None):
        if not lights:
            raise SceneError(f"scene '{name}' needs at least one light")
        if len(lights) > MAX_LIGHTS:
            raise SceneError(f"scene '{name}' has {len(lights)} lights; at most {MAX_LIGHTS} fit a bitmask")
        self.name = name
        self.mesh = mesh
        self.lights = tuple(lights)
        self.bvh: Bvh = build_bvh(mesh)
        self.default_camera = default_camera or Camera()
        logger.info("scene '%s': %d triangles, %d lights", name, len(mesh), len(self.lights))

    @property
    def triangles(self) -> List[Triangle]:
        return [self.mesh.triangle(i) for i in range(len(self.mesh))]

    def mesh_ids(self) -> List[int]:
        return sorted(set(int(m) for m in self.mesh.mesh_id))

    def animated(self, animations: Sequence[MeshAnimation], tick: int) -> "Scene":
        """
        Return the scene with every animation applied for `tick`.

        Args:
            animations: rigid animations to apply
            tick: trajectory tick; rotation angle is degrees_per_tick * tick

        Returns:
            This scene when nothing moves, otherwise a new Scene with a rebuilt BVH
        """
        if not animations or tick == 0:
            return self
        v0, v1, v2 = self.mesh.v0.copy(), self.mesh.v1.copy(), self.mesh.v2.copy()
        moved = False
        for anim in animations:
            select = self.mesh.mesh_id == anim.mesh_id
            if not select.any() or anim.degrees_per_tick == 0:
                continue
            rotation = _axis_angle(anim.axis, math.radians(anim.degrees_per_tick * tick))
            pivot = np.asarray(anim.pivot, dtype=np.float64)
            for verts in (v0, v1, v2):
                verts[select] = (verts[select] - pivot) @ rotation.T + pivot
            moved = True
        if not moved:
            return self
        mesh = TriangleMesh(v0, v1, v2, self.mesh.mesh_id, self.mesh.albedo)
        return Scene(self.name, mesh, self.lights, self.default_camera)


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return c * np.eye(3) + s * k + (1 - c) * np.outer(axis, axis)


class _MeshBuilder:
    """Collects quads and boxes into structure-of-arrays form."""

    def __init__(self):
        self.v0: List = []
        self.v1: List = []
        self.v2: List = []
        self.mesh_id: List[int] = []
        self.albedo: List = []

    def triangle(self, a, b, c, mesh_id, albedo):
        self.v0.append(a)
        self.v1.append(b)
        self.v2.append(c)
        self.mesh_id.append(mesh_id)
        self.albedo.append(albedo)

    def quad(self, a, b, c, d, mesh_id, albedo):
        """Counter-clockwise quad a-b-c-d as two triangles."""
        self.triangle(a, b, c, mesh_id, albedo)
        self.triangle(a, c, d, mesh_id, albedo)

    def box(self, lo, hi, mesh_id, albedo):
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        self.quad((x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0), mesh_id, albedo)  # top
        self.quad((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1), mesh_id, albedo)  # bottom
        self.quad((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1), mesh_id, albedo)  # +z
        self.quad((x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0), mesh_id, albedo)  # -z
        self.quad((x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1), mesh_id, albedo)  # +x
        self.quad((x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0), mesh_id, albedo)  # -x

    def build(self) -> TriangleMesh:
        return TriangleMesh(self.v0, self.v1, self.v2, self.mesh_id, self.albedo)


def _box_room(params: Mapping) -> Scene:
    half = float(params.get("half_width", 4.0))
    height = float(params.get("height", 4.0))
    light_radius = float(params.get("light_radius", 0.35))
    b = _MeshBuilder()
    # Walls face inward; the +z side is left open for the camera.
    b.quad((-half, 0, -half), (-half, 0, half), (half, 0, half), (half, 0, -half), 0, (0.75, 0.72, 0.68))
    b.quad((-half, height, -half), (half, height, -half), (half, height, half), (-half, height, half), 1,
           (0.85, 0.85, 0.85))
    b.quad((-half, 0, -half), (half, 0, -half), (half, height, -half), (-half, height, -half), 2,
           (0.70, 0.75, 0.80))
    b.quad((-half, 0, -half), (-half, height, -half), (-half, height, half), (-half, 0, half), 3,
           (0.80, 0.35, 0.30))
    b.quad((half, 0, -half), (half, 0, half), (half, height, half), (half, height, -half), 4,
           (0.30, 0.55, 0.80))
    b.box((-1.9, 0.0, -1.6), (-0.7, 1.2, -0.4), 5, (0.85, 0.80, 0.55))
    b.box((1.2, 0.0, -2.3), (1.8, 2.6, -1.7), 6, (0.60, 0.80, 0.60))
    b.box((0.2, 0.9, 0.4), (1.0, 1.0, 1.2), 7, (0.90, 0.90, 0.90))
    light = Light((0.0, height - 0.6, -0.3), light_radius, (14.0, 13.5, 12.0))
    camera = Camera.looking_at((0.0, 2.0, half - 0.5), (0.0, 1.0, -1.5))
    return Scene("box-room", b.build(), [light], camera)


def _columns_hall(params: Mapping) -> Scene:
    seed = int(params.get("seed", 7))
    columns = int(params.get("columns", 8))
    half = float(params.get("half_width", 8.0))
    rng = np.random.default_rng(seed)
    b = _MeshBuilder()
    b.quad((-half, 0, -half), (-half, 0, half), (half, 0, half), (half, 0, -half), 0, (0.7, 0.7, 0.7))
    for i in range(columns):
        x, z = rng.uniform(-half + 1.0, half - 1.0, size=2)
        size = float(rng.uniform(0.3, 0.7))
        tall = float(rng.uniform(1.5, 4.0))
        albedo = tuple(float(c) for c in rng.uniform(0.4, 0.9, size=3))
        b.box((x - size, 0.0, z - size), (x + size, tall, z + size), i + 1, albedo)
    lights = [
        Light((-2.0, 6.0, 1.0), 0.5, (30.0, 28.0, 26.0)),
        Light((3.0, 5.0, -2.0), 0.3, (12.0, 14.0, 18.0)),
    ]
    camera = Camera.looking_at((0.0, 3.0, half + 2.0), (0.0, 0.5, 0.0))
    return Scene("columns-hall", b.build(), lights, camera)


def _corner_wall(params: Mapping) -> Scene:
    extent = float(params.get("extent", 1000.0))
    b = _MeshBuilder()
    # Ground y = 0 for x >= 0 and the vertical wall x = 0; both large enough to
    # act as infinite planes for hemisphere queries near the crease.
    b.quad((0, 0, -extent), (0, 0, extent), (extent, 0, extent), (extent, 0, -extent), 0, (0.8, 0.8, 0.8))
    b.quad((0, 0, -extent), (0, extent, -extent), (0, extent, extent), (0, 0, extent), 1, (0.8, 0.8, 0.8))
    light = Light((3.0, 5.0, 0.0), float(params.get("light_radius", 0.5)), (30.0, 30.0, 30.0))
    camera = Camera.looking_at((4.0, 2.0, 4.0), (0.5, 0.0, 0.0))
    return Scene("corner-wall", b.build(), [light], camera)


_GENERATORS = {
    "box-room": _box_room,
    "columns-hall": _columns_hall,
    "corner-wall": _corner_wall,
}


def generate_scene(name: str, params: Optional[Mapping] = None) -> Scene:
    """
    Build one of the procedural scenes.

    Args:
        name: one of box-room, columns-hall, corner-wall
        params: generator parameters (seed for columns-hall, sizes, light radius)

    Returns:
        A deterministic Scene for (name, params)

    Raises:
        SceneError: If the scene name is unknown
    """
    try:
        generator = _GENERATORS[name]
    except KeyError:
        raise SceneError(f"unknown scene '{name}' (expected one of {', '.join(SCENE_NAMES)})") from None
    return generator(dict(params or {}))


def load_triangle_soup(filepath: str, name: Optional[str] = None) -> Scene:
    """
    Load a scene from the triangle-soup text format.

    The header line is `tris <count> lights <count>`, followed by one line per
    triangle (9 vertex floats, mesh_id, 3 albedo floats) and one line per
    light (3 center floats, radius, 3 intensity floats). `#` starts a comment.

    Args:
        filepath: path to the soup file
        name: scene name, defaults to the file stem

    Raises:
        FileNotFoundError: If the file doesn't exist
        SceneError: For malformed content
    """
    path = Path(filepath)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"Triangle soup file '{filepath}' not found.") from None

    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            records.append((lineno, line.split()))
    if not records:
        raise SceneError(f"{filepath}: empty triangle soup")

    lineno, header = records[0]
    if len(header) != 4 or header[0] != "tris" or header[2] != "lights":
        raise SceneError(f"{filepath}:{lineno}: expected 'tris <count> lights <count>'")
    try:
        n_tris, n_lights = int(header[1]), int(header[3])
    except ValueError:
        raise SceneError(f"{filepath}:{lineno}: counts must be integers") from None
    body = records[1:]
    if len(body) != n_tris + n_lights:
        raise SceneError(f"{filepath}: header announces {n_tris + n_lights} records, found {len(body)}")

    triangles, lights = [], []
    for lineno, fields in body[:n_tris]:
        if len(fields) != 13:
            raise SceneError(f"{filepath}:{lineno}: triangle records have 13 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[:9]]
            triangles.append(Triangle(
                tuple(values[0:3]), tuple(values[3:6]), tuple(values[6:9]),
                int(fields[9]), tuple(float(v) for v in fields[10:13]),
            ))
        except ValueError as e:
            raise SceneError(f"{filepath}:{lineno}: {e}") from None
    for lineno, fields in body[n_tris:]:
        if len(fields) != 7:
            raise SceneError(f"{filepath}:{lineno}: light records have 7 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError as e:
            raise SceneError(f"{filepath}:{lineno}: {e}") from None
        lights.append(Light(tuple(values[0:3]), values[3], tuple(values[4:7])))

    logger.info("loaded %d triangles and %d lights from %s", len(triangles), len(lights), filepath)
    return Scene(name or path.stem, TriangleMesh.from_triangles(triangles), lights)


def save_triangle_soup(scene: Scene, filepath: str) -> None:
    """Write `scene` in the triangle-soup text format."""
    lines = [f"# {scene.name}", f"tris {len(scene.mesh)} lights {len(scene.lights)}"]
    mesh = scene.mesh
    for i in range(len(mesh)):
        coords = np.concatenate([mesh.v0[i], mesh.v1[i], mesh.v2[i]])
        lines.append(" ".join(repr(float(c)) for c in coords)
                     + f" {int(mesh.mesh_id[i])} "
                     + " ".join(repr(float(c)) for c in mesh.albedo[i]))
    for light in scene.lights:
        lines.append(" ".join(repr(float(c)) for c in (*light.center, light.radius, *light.intensity)))
    Path(filepath).write_text("\n".join(lines) + "\n", encoding="utf-8")
