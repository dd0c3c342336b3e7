"""
Ray Tracing Module

This module provides the server-side lighting passes: per-pixel shadow
visibility bitmasks (hard and soft, one bit per light) and raw
ambient-occlusion ray counts, plus the buffer types they produce and the
high-sample reference estimators used as oracles.
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .bvh import occluded_batch
from .errors import DecodeError, SceneError
from .gbuffer import CameraPose, GBuffer
from .sampling import (STREAM_AO, STREAM_VISIBILITY, SamplerState,
                       cone_directions, cosine_hemisphere_directions)
from .scene import MAX_LIGHTS, Light, Scene

logger = logging.getLogger(__name__)

SURFACE_OFFSET = 1e-4
MODE_HARD = "hard"
MODE_SOFT = "soft"
SHADOW_MODES = (MODE_HARD, MODE_SOFT)
# Rays per tracing batch; bounds the wavefront memory.
_RAY_BATCH = 1 << 18


@dataclass(frozen=True, eq=False)
class VisibilityBuffer:
    """
    Per-pixel light visibility bitmask: bit i is 1 iff light i is visible.

    Attributes:
        bits: (H, W) uint8
        light_count: number of lights L (bits above L - 1 are zero)
        mode: "hard" or "soft"
        pose: pose the buffer was traced for (frame_id included)
    """

    bits: np.ndarray
    light_count: int
    mode: str
    pose: CameraPose

    @property
    def frame_id(self) -> int:
        return self.pose.frame_id

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def light_visible(self, index: int) -> np.ndarray:
        return ((self.bits >> index) & 1).astype(bool)

    def __eq__(self, other):
        if not isinstance(other, VisibilityBuffer):
            return NotImplemented
        return (self.light_count == other.light_count and self.mode == other.mode
                and self.pose == other.pose and np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class AoBuffer:
    """
    Per-pixel count of unoccluded AO rays, one byte per pixel.

    Attributes:
        counts: (H, W) uint8, each <= rays
        rays: rays per pixel N (1..255)
        radius: hemisphere radius r, rounded to float32 for the wire
        pose: pose the buffer was traced for
        filtered: True once the SVGF filter has been applied
    """

    counts: np.ndarray
    rays: int
    radius: float
    pose: CameraPose
    filtered: bool = False

    def __post_init__(self):
        object.__setattr__(self, "radius", float(np.float32(self.radius)))

    @property
    def frame_id(self) -> int:
        return self.pose.frame_id

    @property
    def shape(self) -> Tuple[int, int]:
        return self.counts.shape

    def occlusion_factor(self) -> np.ndarray:
        """O = count / N per pixel."""
        return self.counts.astype(np.float64) / self.rays

    def with_counts(self, counts: np.ndarray, filtered: bool) -> "AoBuffer":
        return replace(self, counts=counts, filtered=filtered)

    def __eq__(self, other):
        if not isinstance(other, AoBuffer):
            return NotImplemented
        return (self.rays == other.rays and self.radius == other.radius and self.filtered == other.filtered
                and self.pose == other.pose and np.array_equal(self.counts, other.counts))


def cone_half_angle(light: Light, point) -> float:
    """
    Half angle of the cone subtended by a spherical light seen from `point`.

    Returns:
        arcsin(min(1, radius / distance)); 0 for point lights

    Raises:
        ValueError: If `point` coincides with the light center
    """
    distance = float(np.linalg.norm(np.subtract(light.center, point)))
    if distance == 0.0:
        raise ValueError("point coincides with the light center")
    return float(np.arcsin(min(1.0, light.radius / distance)))


def _cone_half_angles(light: Light, distances: np.ndarray) -> np.ndarray:
    return np.arcsin(np.minimum(1.0, light.radius / np.maximum(distances, 1e-12)))


def _offset_origins(gbuffer: GBuffer, valid: np.ndarray) -> np.ndarray:
    return gbuffer.world_pos[valid] + SURFACE_OFFSET * gbuffer.normal[valid]


def _sphere_entry(origins, directions, center, radius) -> np.ndarray:
    """Distance to the first intersection with the light sphere (0 if inside)."""
    oc = center - origins
    b = np.einsum("ij,ij->i", directions, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = np.maximum(b * b - c, 0.0)
    t = b - np.sqrt(disc)
    return np.where(c > 0.0, np.maximum(t, SURFACE_OFFSET), SURFACE_OFFSET)


def _light_visibility(bvh, origins, pixel_index, light: Light, light_index: int,
                      mode: str, sampler: SamplerState) -> np.ndarray:
    center = np.asarray(light.center, dtype=np.float64)
    to_center = center - origins
    distance = np.linalg.norm(to_center, axis=1)
    axis = to_center / np.maximum(distance, 1e-12)[:, None]
    if mode == MODE_HARD or light.radius == 0.0:
        return ~occluded_batch(bvh, origins, axis, distance)
    u = sampler.uniform2(pixel_index, light_index)
    directions = cone_directions(axis, _cone_half_angles(light, distance), u)
    t_max = _sphere_entry(origins, directions, center, light.radius)
    return ~occluded_batch(bvh, origins, directions, t_max)


def trace_visibility(gbuffer: GBuffer, scene: Scene, lights: Optional[Sequence[Light]] = None,
                     mode: str = MODE_HARD, sampler: Optional[SamplerState] = None) -> VisibilityBuffer:
    """
    Trace one shadow ray per pixel per light.

    Hard mode aims at the light center; soft mode jitters the ray inside the
    cone subtended by the light and bounds it at the sampled point on the
    light. Background pixels are fully lit.

    Args:
        gbuffer: G-buffer of the frame
        scene: scene with BVH
        lights: lights to test, defaults to the scene's lights
        mode: "hard" or "soft"
        sampler: sampler for soft mode; its frame_id should be the frame's

    Returns:
        VisibilityBuffer tagged with the G-buffer's pose

    Raises:
        SceneError: If more than 8 lights are given
        ValueError: If the mode is unknown
    """
    lights = tuple(scene.lights if lights is None else lights)
    if len(lights) > MAX_LIGHTS:
        raise SceneError(f"{len(lights)} lights overflow the 8-bit visibility lane")
    if mode not in SHADOW_MODES:
        raise ValueError(f"unknown shadow mode '{mode}'")
    sampler = (sampler or SamplerState(0, gbuffer.frame_id)).for_stream(STREAM_VISIBILITY)

    valid = gbuffer.valid
    full = np.uint8((1 << len(lights)) - 1)
    bits = np.full(gbuffer.shape, full, dtype=np.uint8)
    origins = _offset_origins(gbuffer, valid)
    pixel_index = np.flatnonzero(valid.reshape(-1))
    lane = np.zeros(len(origins), dtype=np.uint8)
    for i, light in enumerate(lights):
        visible = _light_visibility(scene.bvh, origins, pixel_index, light, i, mode, sampler)
        lane |= visible.astype(np.uint8) << np.uint8(i)
    bits[valid] = lane
    return VisibilityBuffer(bits, len(lights), mode, gbuffer.pose)


def ao_unoccluded(scene: Scene, origins, normals, pixel_index, rays: int, radius: float,
                  sampler: SamplerState, first_ray: int = 0) -> np.ndarray:
    """
    Count unoccluded cosine-weighted rays per origin.

    Ray k of pixel p uses sample stream (p, first_ray + k), so different radii
    share directions and a reference estimator can extend the same streams.
    """
    counts = np.zeros(len(origins), dtype=np.int64)
    if len(origins) == 0:
        return counts
    per_batch = max(1, _RAY_BATCH // len(origins))
    for k0 in range(0, rays, per_batch):
        ks = np.arange(k0, min(rays, k0 + per_batch)) + first_ray
        pix = np.repeat(pixel_index[None, :], len(ks), axis=0).reshape(-1)
        ray_ids = np.repeat(ks[:, None], len(origins), axis=1).reshape(-1)
        u = np.stack([sampler.uniform(pix, ray_ids, 0), sampler.uniform(pix, ray_ids, 1)], axis=-1)
        directions = cosine_hemisphere_directions(np.tile(normals, (len(ks), 1)), u)
        hit = occluded_batch(scene.bvh, np.tile(origins, (len(ks), 1)), directions, radius)
        counts += (~hit).reshape(len(ks), len(origins)).sum(axis=0)
    return counts


def trace_ao(gbuffer: GBuffer, scene: Scene, rays: int, radius: float,
             sampler: Optional[SamplerState] = None) -> AoBuffer:
    """
    Trace `rays` cosine-weighted AO rays per pixel, each bounded at `radius`.

    Args:
        gbuffer: G-buffer of the frame
        scene: scene with BVH
        rays: N, 1..255
        radius: hemisphere radius r > 0
        sampler: per-frame sampler

    Returns:
        AoBuffer with count = N for background pixels

    Raises:
        ValueError: If N or r is out of range
    """
    if not 1 <= rays <= 255:
        raise ValueError(f"rays must be in [1, 255], got {rays}")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    sampler = (sampler or SamplerState(0, gbuffer.frame_id)).for_stream(STREAM_AO)
    valid = gbuffer.valid
    counts = np.full(gbuffer.shape, rays, dtype=np.uint8)
    origins = _offset_origins(gbuffer, valid)
    pixel_index = np.flatnonzero(valid.reshape(-1))
    counts[valid] = ao_unoccluded(scene, origins, gbuffer.normal[valid], pixel_index,
                                  rays, float(np.float32(radius)), sampler).astype(np.uint8)
    return AoBuffer(counts, rays, radius, gbuffer.pose)


def reference_visibility(gbuffer: GBuffer, scene: Scene, mode: str, samples: int,
                         sampler: SamplerState) -> np.ndarray:
    """
    Fractional per-light visibility averaged over `samples` shadow rays.

    Sample 0 reuses the server's stream, so one sample equals trace_visibility.

    Returns:
        (H, W, L) float array in [0, 1]
    """
    sampler = sampler.for_stream(STREAM_VISIBILITY)
    lights = scene.lights
    valid = gbuffer.valid
    out = np.ones(gbuffer.shape + (len(lights),))
    origins = _offset_origins(gbuffer, valid)
    pixel_index = np.flatnonzero(valid.reshape(-1))
    for i, light in enumerate(lights):
        total = np.zeros(len(origins))
        draws = 1 if mode == MODE_HARD or light.radius == 0.0 else samples
        for s in range(draws):
            # Extra samples live on ray indices past the light count.
            ray_index = i if s == 0 else MAX_LIGHTS * s + i
            total += _light_visibility(scene.bvh, origins, pixel_index, light, ray_index, mode, sampler)
        out[valid, i] = total / draws
    return out


def reference_ao(gbuffer: GBuffer, scene: Scene, rays: int, radius: float, samples: int,
                 sampler: SamplerState) -> np.ndarray:
    """
    Unoccluded fraction from rays * samples AO rays per pixel.

    Returns:
        (H, W) float array, 1 for background
    """
    sampler = sampler.for_stream(STREAM_AO)
    valid = gbuffer.valid
    out = np.ones(gbuffer.shape)
    origins = _offset_origins(gbuffer, valid)
    pixel_index = np.flatnonzero(valid.reshape(-1))
    counts = ao_unoccluded(scene, origins, gbuffer.normal[valid], pixel_index,
                           rays * samples, float(np.float32(radius)), sampler)
    out[valid] = counts / float(rays * samples)
    return out


# Raw AO plane file: header then W*H count bytes.
_AO_MAGIC = b"DHRA"
_AO_HEADER = struct.Struct("<4sHHBxxxfI")


def save_ao_plane(ao: AoBuffer, filepath: str) -> None:
    """Write the count plane with {magic "DHRA", width, height, N, r, frame_id}."""
    h, w = ao.shape
    header = _AO_HEADER.pack(_AO_MAGIC, w, h, ao.rays, ao.radius, ao.frame_id)
    Path(filepath).write_bytes(header + np.ascontiguousarray(ao.counts, dtype=np.uint8).tobytes())


def load_ao_plane(filepath: str, pose: CameraPose) -> AoBuffer:
    """
    Read a raw AO plane written by save_ao_plane.

    Raises:
        FileNotFoundError: If the file doesn't exist
        DecodeError: For a bad magic or a size mismatch
    """
    try:
        data = Path(filepath).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"AO plane '{filepath}' not found.") from None
    if len(data) < _AO_HEADER.size:
        raise DecodeError(f"{filepath}: truncated header")
    magic, w, h, rays, radius, frame_id = _AO_HEADER.unpack_from(data)
    if magic != _AO_MAGIC:
        raise DecodeError(f"{filepath}: bad magic {magic!r}")
    body = data[_AO_HEADER.size:]
    if len(body) != w * h:
        raise DecodeError(f"{filepath}: expected {w * h} count bytes, found {len(body)}")
    counts = np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
    return AoBuffer(counts, rays, radius, pose.with_frame(frame_id))
