"""
Compose Module

This module provides the client-side integration step: predicting stale
server buffers for the current view by reprojection, and shading the final
image (Lambertian direct light gated by shadow visibility, attenuated by
ambient occlusion).
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError
from .gbuffer import CameraPose, GBuffer, project_points
from .raytrace import AoBuffer, VisibilityBuffer
from .scene import Light

logger = logging.getLogger(__name__)

DEFAULT_AMBIENT = 0.15
PNG_GAMMA = 2.2


@dataclass(frozen=True)
class ShadingParams:
    """
    Attributes:
        ambient: constant ambient term k_a, attenuated by AO like direct light
        clear_color: linear RGB in [0, 1] for background pixels
        tau_z: relative depth tolerance when validating reprojected taps
    """

    ambient: float = DEFAULT_AMBIENT
    clear_color: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    tau_z: float = 0.1

    def __post_init__(self):
        if self.ambient < 0:
            raise ValueError(f"ambient must be >= 0, got {self.ambient}")
        if len(self.clear_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.clear_color):
            raise ValueError("clear_color must be three values in [0, 1]")
        object.__setattr__(self, "clear_color", tuple(float(c) for c in self.clear_color))


@dataclass(frozen=True, eq=False)
class FinalImage:
    """
    A composed frame.

    Attributes:
        rgb: (H, W, 3) uint8, the clamped and quantized image
        linear: (H, W, 3) float in [0, 1] before quantization
        frame_id: frame the image shows, when known
        pose: pose it was shaded for, when known
    """

    rgb: np.ndarray
    linear: np.ndarray
    frame_id: Optional[int] = None
    pose: Optional[CameraPose] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.shape[:2]

    def save_png(self, filepath: str, gamma: float = PNG_GAMMA) -> None:
        encoded = np.floor(np.clip(self.linear, 0.0, 1.0) ** (1.0 / gamma) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(encoded).save(filepath)


@dataclass(frozen=True)
class PredictionResult:
    """Predicted buffer plus the mask of pixels that fell back to local shading."""

    buffer: Union[VisibilityBuffer, AoBuffer]
    holes: np.ndarray

    @property
    def hole_fraction(self) -> float:
        return float(self.holes.mean()) if self.holes.size else 0.0


def ao_factor(count, rays: int):
    """
    Occlusion factor O = count / N.

    Raises:
        ValueError: If N < 1 or any count exceeds N
    """
    if rays < 1:
        raise ValueError(f"rays must be >= 1, got {rays}")
    count = np.asarray(count)
    if np.any(count > rays) or np.any(count < 0):
        raise ValueError(f"AO count must be within [0, {rays}]")
    factor = count.astype(np.float64) / rays
    return float(factor) if factor.ndim == 0 else factor


def _plane_and_fallback(stale: Union[VisibilityBuffer, AoBuffer]):
    if isinstance(stale, VisibilityBuffer):
        return stale.bits, np.uint8((1 << stale.light_count) - 1)
    return stale.counts, np.uint8(stale.rays)


def _with_plane(stale, plane: np.ndarray, pose: CameraPose):
    if isinstance(stale, VisibilityBuffer):
        return replace(stale, bits=plane, pose=pose)
    return replace(stale, counts=plane, pose=pose)


def reproject_server_buffer(stale: Union[VisibilityBuffer, AoBuffer], gbuffer_now: GBuffer,
                            stale_gbuffer: Optional[GBuffer] = None,
                            params: Optional[ShadingParams] = None) -> PredictionResult:
    """
    Predict a stale server buffer for the current view.

    Every current surface point is projected into the pose the stale buffer
    was traced for and takes the nearest stale pixel. When the client still
    holds its G-buffer for that stale frame, taps whose depth disagrees with
    the projected depth are rejected. Rejected or off-screen pixels become
    holes carrying the local-only fallback (all lights visible, AO count N).

    Args:
        stale: last received buffer, tagged with its pose
        gbuffer_now: current G-buffer
        stale_gbuffer: the client's G-buffer for the stale frame, if retained
        params: supplies the depth tolerance

    Returns:
        PredictionResult with the predicted buffer (tagged with the current pose)
    """
    params = params or ShadingParams()
    plane, fallback = _plane_and_fallback(stale)
    if plane.shape != gbuffer_now.shape:
        raise DimensionMismatchError(f"stale buffer {plane.shape} does not match G-buffer {gbuffer_now.shape}")
    if stale.pose.same_view(gbuffer_now.pose):
        return PredictionResult(stale, np.zeros(plane.shape, dtype=bool))

    h, w = plane.shape
    valid = gbuffer_now.valid
    sx, sy, z = project_points(gbuffer_now.world_pos[valid], stale.pose, gbuffer_now.camera)
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    ok = (z > 0) & (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    cx = np.clip(ix, 0, w - 1)
    cy = np.clip(iy, 0, h - 1)
    if (stale_gbuffer is not None and stale_gbuffer.shape == plane.shape
            and stale_gbuffer.pose.same_view(stale.pose)):
        tap_depth = stale_gbuffer.depth[cy, cx]
        with np.errstate(invalid="ignore"):
            relative = np.abs(z - tap_depth) / np.maximum(z, tap_depth)
        ok &= stale_gbuffer.valid[cy, cx] & (relative <= params.tau_z)

    predicted = np.full(plane.shape, fallback, dtype=np.uint8)
    values = np.where(ok, plane[cy, cx], fallback)
    predicted[valid] = values
    holes = np.zeros(plane.shape, dtype=bool)
    holes[valid] = ~ok
    logger.debug("reprojected %s frame %d to frame %d: %.1f%% holes", type(stale).__name__, stale.frame_id,
                 gbuffer_now.frame_id, 100.0 * holes.mean())
    return PredictionResult(_with_plane(stale, predicted, gbuffer_now.pose), holes)


def shade(gbuffer: GBuffer, visibility: np.ndarray, occlusion: np.ndarray, lights: Sequence[Light],
          params: Optional[ShadingParams] = None) -> FinalImage:
    """
    Shade every pixel from fractional inputs.

    color = albedo * O * (k_a + sum_i v_i * I_i * max(0, n.l_i) / d_i^2)

    Args:
        gbuffer: current G-buffer
        visibility: (H, W, L) per-light visibility in [0, 1]
        occlusion: (H, W) AO factor in [0, 1]
        lights: the scene lights
        params: ambient term and clear color
    """
    params = params or ShadingParams()
    valid = gbuffer.valid
    position = gbuffer.world_pos[valid]
    normal = gbuffer.normal[valid]
    radiance = np.full((len(position), 3), params.ambient)
    for i, light in enumerate(lights):
        to_light = np.asarray(light.center, dtype=np.float64) - position
        d2 = np.einsum("ij,ij->i", to_light, to_light)
        cos = np.maximum(0.0, np.einsum("ij,ij->i", normal, to_light) / np.sqrt(d2))
        radiance += (visibility[valid, i] * cos / d2)[:, None] * np.asarray(light.intensity, dtype=np.float64)
    color = gbuffer.albedo[valid] * occlusion[valid][:, None] * radiance

    linear = np.empty(gbuffer.shape + (3,))
    linear[...] = params.clear_color
    linear[valid] = color
    linear = np.clip(linear, 0.0, 1.0)
    rgb = np.floor(linear * 255.0 + 0.5).astype(np.uint8)
    return FinalImage(rgb, linear, gbuffer.frame_id, gbuffer.pose)


def compose_final(gbuffer: GBuffer, vis: Optional[VisibilityBuffer], ao: Optional[AoBuffer],
                  lights: Sequence[Light], params: Optional[ShadingParams] = None) -> FinalImage:
    """
    Compose the final image from server buffers.

    A missing visibility buffer means every light is visible; a missing AO
    buffer means no occlusion.

    Raises:
        DimensionMismatchError: If a buffer's resolution differs from the G-buffer's
    """
    shape = gbuffer.shape
    for buffer in (vis, ao):
        if buffer is not None and buffer.shape != shape:
            raise DimensionMismatchError(f"{type(buffer).__name__} {buffer.shape} does not match G-buffer {shape}")
    if vis is None:
        visibility = np.ones(shape + (len(lights),))
    else:
        visibility = np.stack([vis.light_visible(i) for i in range(len(lights))], axis=-1).astype(np.float64)
    occlusion = np.ones(shape) if ao is None else ao_factor(ao.counts, ao.rays)
    return shade(gbuffer, visibility, occlusion, lights, params)


def export_frames(images: Sequence[FinalImage], directory: str, gamma: float = PNG_GAMMA) -> int:
    """Write images as frame_00000.png, frame_00001.png, ... Returns the number written."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for index, image in enumerate(images):
        image.save_png(str(out / f"frame_{index:05d}.png"), gamma)
    return len(images)
