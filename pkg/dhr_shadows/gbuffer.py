"""
G-Buffer Module

This module provides the client-side geometry buffer: CameraPose (the per-frame
camera placement that also travels on the wire), GBuffer (per-pixel position,
normal, depth, mesh id, motion and albedo), rasterization by primary-ray
casting at pixel centers, camera-motion vectors, and the binary dump format
used by the standalone denoiser.
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .bvh import facing_normals, intersect_batch
from .errors import DecodeError, DimensionMismatchError
from .scene import Camera, Scene, look_at_rotation

logger = logging.getLogger(__name__)

BACKGROUND_MESH_ID = -1


@dataclass(frozen=True, eq=False)
class CameraPose:
    """
    Camera placement for one frame.

    Position and orientation are stored as float32 so the 12-float wire pose
    is bit-identical to the in-memory pose. Orientation rows are
    (right, up, forward).
    """

    frame_id: int
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float32).reshape(3)
        orientation = np.asarray(self.orientation, dtype=np.float32).reshape(3, 3)
        position.setflags(write=False)
        orientation.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", orientation)

    @classmethod
    def from_camera(cls, camera: Camera, frame_id: int = 0) -> "CameraPose":
        return cls(frame_id, camera.position, camera.orientation)

    @classmethod
    def looking_at(cls, frame_id: int, position, target, up_hint=(0.0, 1.0, 0.0)) -> "CameraPose":
        return cls(frame_id, position, look_at_rotation(position, target, up_hint))

    @classmethod
    def from_floats(cls, frame_id: int, values) -> "CameraPose":
        values = np.asarray(values, dtype=np.float32).reshape(12)
        return cls(frame_id, values[:3], values[3:].reshape(3, 3))

    def to_floats(self) -> np.ndarray:
        """The 12 wire floats: position then the orientation rows."""
        return np.concatenate([self.position, self.orientation.reshape(9)])

    def with_frame(self, frame_id: int) -> "CameraPose":
        return replace(self, frame_id=frame_id)

    def same_view(self, other: "CameraPose") -> bool:
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return self.frame_id == other.frame_id and self.same_view(other)

    def __hash__(self):
        return hash((self.frame_id, self.position.tobytes(), self.orientation.tobytes()))

    def view_projection(self, camera: Camera, near: float = 0.01, far: float = 1000.0) -> np.ndarray:
        """
        OpenGL-style 4x4 view-projection matrix for this pose.

        The matrix is invertible for any orthonormal orientation and 0 < near < far.
        """
        rotation = self.orientation.astype(np.float64)
        position = self.position.astype(np.float64)
        view = np.eye(4)
        # View space looks down -z, so negate the forward row.
        view[:3, :3] = np.stack([rotation[0], rotation[1], -rotation[2]])
        view[:3, 3] = -view[:3, :3] @ position
        f = 1.0 / camera.tan_half_fov
        proj = np.zeros((4, 4))
        proj[0, 0] = f / camera.aspect
        proj[1, 1] = f
        proj[2, 2] = (far + near) / (near - far)
        proj[2, 3] = 2.0 * far * near / (near - far)
        proj[3, 2] = -1.0
        return proj @ view


def project_points(points: np.ndarray, pose: CameraPose, camera: Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project world points into continuous pixel coordinates of `pose`.

    Pixel (i, j) has its center at (i, j); j grows downward.

    Returns:
        (sx, sy, depth) arrays; depth is the view-space distance along forward
        and is <= 0 for points behind the camera
    """
    rel = points - pose.position.astype(np.float64)
    rotation = pose.orientation.astype(np.float64)
    x = rel @ rotation[0]
    y = rel @ rotation[1]
    z = rel @ rotation[2]
    safe_z = np.where(z > 1e-12, z, 1e-12)
    ndc_x = x / (safe_z * camera.tan_half_fov * camera.aspect)
    ndc_y = y / (safe_z * camera.tan_half_fov)
    sx = (ndc_x + 1.0) * 0.5 * camera.width - 0.5
    sy = (1.0 - ndc_y) * 0.5 * camera.height - 0.5
    return sx, sy, z


def primary_rays(pose: CameraPose, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit ray directions through every pixel center, row-major.

    Returns:
        (origin (3,), directions (H*W, 3))
    """
    w, h = camera.width, camera.height
    i = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    j = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    ndc_x, ndc_y = np.meshgrid(i, j)
    rotation = pose.orientation.astype(np.float64)
    dirs = (rotation[2][None, None, :]
            + (ndc_x * camera.tan_half_fov * camera.aspect)[..., None] * rotation[0]
            + (ndc_y * camera.tan_half_fov)[..., None] * rotation[1])
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return pose.position.astype(np.float64), dirs


class GBuffer:
    """
    Per-pixel geometry attributes at camera resolution.

    Attributes:
        world_pos: (H, W, 3), NaN for background
        normal: (H, W, 3) unit normals facing the camera, zero for background
        depth: (H, W) linear view depth, +inf for background
        mesh_id: (H, W) int32, -1 for background
        motion: (H, W, 2) offset in pixels to the previous frame (dx, dy)
        albedo: (H, W, 3)
        pose: CameraPose the buffer was rendered for
        camera: Camera supplying the intrinsics
    """

    def __init__(self, world_pos, normal, depth, mesh_id, motion, albedo, pose: CameraPose, camera: Camera):
        self.world_pos = world_pos
        self.normal = normal
        self.depth = depth
        self.mesh_id = mesh_id
        self.motion = motion
        self.albedo = albedo
        self.pose = pose
        self.camera = camera
        shape = depth.shape
        if shape != (camera.height, camera.width):
            raise DimensionMismatchError(f"G-buffer planes {shape} do not match camera resolution "
                                         f"{(camera.height, camera.width)}")
        for name in ("world_pos", "normal", "mesh_id", "motion", "albedo"):
            if getattr(self, name).shape[:2] != shape:
                raise DimensionMismatchError(f"G-buffer plane '{name}' has shape {getattr(self, name).shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.mesh_id >= 0

    @property
    def frame_id(self) -> int:
        return self.pose.frame_id

    def with_motion(self, motion: np.ndarray) -> "GBuffer":
        return GBuffer(self.world_pos, self.normal, self.depth, self.mesh_id, motion,
                       self.albedo, self.pose, self.camera)

    @classmethod
    def from_surface(cls, world_pos, normal, mesh_id, pose: CameraPose, camera: Camera,
                     albedo=None) -> "GBuffer":
        """
        Build a G-buffer from explicit surface samples (used for synthetic
        patches and for planes reloaded from dumps).
        """
        world_pos = np.asarray(world_pos, dtype=np.float64)
        mesh_id = np.asarray(mesh_id, dtype=np.int32)
        valid = mesh_id >= 0
        _, _, depth = project_points(world_pos.reshape(-1, 3), pose, camera)
        depth = np.where(valid, depth.reshape(mesh_id.shape), np.inf)
        if albedo is None:
            albedo = np.where(valid[..., None], 0.8, 0.0) * np.ones(world_pos.shape)
        return cls(np.where(valid[..., None], world_pos, np.nan),
                   np.where(valid[..., None], np.asarray(normal, dtype=np.float64), 0.0),
                   depth, mesh_id, np.zeros(mesh_id.shape + (2,)), np.asarray(albedo, dtype=np.float64),
                   pose, camera)


def rasterize(scene: Scene, camera: Camera, pose: CameraPose) -> GBuffer:
    """
    Fill a G-buffer by casting one primary ray per pixel center.

    Args:
        scene: scene with BVH
        camera: intrinsics (resolution, field of view)
        pose: camera placement for this frame

    Returns:
        GBuffer with a zeroed motion field
    """
    h, w = camera.height, camera.width
    origin, dirs = primary_rays(pose, camera)
    origins = np.broadcast_to(origin, dirs.shape)
    t, prim = intersect_batch(scene.bvh, origins, dirs)
    hit = prim >= 0
    mesh = scene.mesh

    world_pos = np.full((h * w, 3), np.nan)
    world_pos[hit] = origins[hit] + t[hit, None] * dirs[hit]
    normal = np.zeros((h * w, 3))
    normal[hit] = facing_normals(mesh, prim[hit], dirs[hit])
    depth = np.full(h * w, np.inf)
    depth[hit] = t[hit] * (dirs[hit] @ pose.orientation[2].astype(np.float64))
    mesh_id = np.full(h * w, BACKGROUND_MESH_ID, dtype=np.int32)
    mesh_id[hit] = mesh.mesh_id[prim[hit]]
    albedo = np.zeros((h * w, 3))
    albedo[hit] = mesh.albedo[prim[hit]]

    logger.debug("rasterized frame %d: %d/%d pixels covered", pose.frame_id, int(hit.sum()), h * w)
    return GBuffer(world_pos.reshape(h, w, 3), normal.reshape(h, w, 3), depth.reshape(h, w),
                   mesh_id.reshape(h, w), np.zeros((h, w, 2)), albedo.reshape(h, w, 3), pose, camera)


def pixel_grid(shape) -> Tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def compute_motion(gbuffer: GBuffer, prev_pose: CameraPose) -> GBuffer:
    """
    Fill camera-motion vectors: previous-frame screen position minus current.

    Background pixels, and every pixel when the pose is unchanged, get zero
    motion. Object motion is not tracked; history validation rejects it.
    """
    motion = np.zeros(gbuffer.shape + (2,))
    if prev_pose.same_view(gbuffer.pose):
        return gbuffer.with_motion(motion)
    valid = gbuffer.valid
    sx, sy, _ = project_points(gbuffer.world_pos[valid], prev_pose, gbuffer.camera)
    xs, ys = pixel_grid(gbuffer.shape)
    motion[valid, 0] = sx - xs[valid]
    motion[valid, 1] = sy - ys[valid]
    return gbuffer.with_motion(motion)


# Dump format: 64-byte header, then the planes named in the bitmap, in bit order.
_DUMP_MAGIC = b"DHRG"
_DUMP_HEADER = struct.Struct("<4sHHII12f")
_PLANES = (
    ("world_pos", 3, "<f4"),
    ("normal", 3, "<f4"),
    ("depth", 1, "<f4"),
    ("mesh_id", 1, "<i4"),
    ("motion", 2, "<f4"),
    ("albedo", 3, "<f4"),
)
ALL_PLANES = (1 << len(_PLANES)) - 1


def dump_gbuffer(gbuffer: GBuffer, filepath: str, planes: int = ALL_PLANES) -> None:
    """
    Write `gbuffer` as flat little-endian planes behind a 64-byte header
    {magic "DHRG", width u16, height u16, frame_id u32, plane bitmap u32, pose 12 f32}.
    """
    h, w = gbuffer.shape
    chunks = [_DUMP_HEADER.pack(_DUMP_MAGIC, w, h, gbuffer.frame_id, planes, *gbuffer.pose.to_floats())]
    for bit, (name, comps, dtype) in enumerate(_PLANES):
        if planes & (1 << bit):
            data = getattr(gbuffer, name).reshape(h, w, comps)
            chunks.append(np.ascontiguousarray(data, dtype=dtype).tobytes())
    Path(filepath).write_bytes(b"".join(chunks))


def load_gbuffer(filepath: str, camera: Camera) -> GBuffer:
    """
    Read a G-buffer dump.

    Args:
        filepath: dump file
        camera: intrinsics; its resolution must match the dump

    Raises:
        FileNotFoundError: If the dump doesn't exist
        DecodeError: For a bad magic, a missing required plane or a short file
    """
    try:
        data = Path(filepath).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"G-buffer dump '{filepath}' not found.") from None
    if len(data) < _DUMP_HEADER.size:
        raise DecodeError(f"{filepath}: truncated header")
    magic, w, h, frame_id, planes, *pose_floats = _DUMP_HEADER.unpack_from(data)
    if magic != _DUMP_MAGIC:
        raise DecodeError(f"{filepath}: bad magic {magic!r}")
    if (w, h) != tuple(camera.resolution):
        raise DimensionMismatchError(f"{filepath}: dump is {w}x{h}, camera is {camera.width}x{camera.height}")
    pose = CameraPose.from_floats(frame_id, pose_floats)

    offset = _DUMP_HEADER.size
    loaded = {}
    for bit, (name, comps, dtype) in enumerate(_PLANES):
        if not planes & (1 << bit):
            continue
        count = w * h * comps
        size = count * 4
        if offset + size > len(data):
            raise DecodeError(f"{filepath}: plane '{name}' is truncated")
        plane = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        loaded[name] = plane.reshape((h, w, comps) if comps > 1 else (h, w))
        offset += size
    for required in ("world_pos", "normal", "mesh_id"):
        if required not in loaded:
            raise DecodeError(f"{filepath}: required plane '{required}' missing")

    mesh_id = loaded["mesh_id"].astype(np.int32)
    gbuffer = GBuffer.from_surface(loaded["world_pos"].astype(np.float64), loaded["normal"].astype(np.float64),
                                   mesh_id, pose, camera,
                                   albedo=loaded["albedo"].astype(np.float64) if "albedo" in loaded else None)
    if "depth" in loaded:
        gbuffer.depth = np.where(mesh_id >= 0, loaded["depth"].astype(np.float64), np.inf)
    if "motion" in loaded:
        gbuffer.motion = loaded["motion"].astype(np.float64)
    return gbuffer
