"""
Denoise Module

This module provides the server-side spatiotemporal filter for the AO signal.
It is a variance-guided filter whose edge-stopping functions use only depth
and surface normals (no luminance):

    1. temporal accumulation with geometry-validated reprojection
    2. variance from temporal moments, or from a geometry-weighted 7x7
       neighbourhood while the history is short
    3. iterated a-trous passes with a B3-spline kernel and doubling step

The same filter can optionally run on each soft-shadow bit plane.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError
from .gbuffer import CameraPose, GBuffer, pixel_grid, project_points
from .raytrace import AoBuffer, VisibilityBuffer

logger = logging.getLogger(__name__)

B3_KERNEL = np.array([1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0])
SPATIAL_VARIANCE_RADIUS = 3
MIN_DEPTH_GRADIENT = 1e-4
_EPS = 1e-8


@dataclass(frozen=True)
class FilterParams:
    """
    Filter parameters.

    Attributes:
        alpha: temporal blend factor in (0, 1]
        h_min: history length below which variance is estimated spatially
        iterations: number of a-trous passes
        sigma_z: depth edge-stopping sensitivity
        sigma_n: normal edge-stopping exponent
        tau_z: relative depth tolerance for history validation
        tau_n: minimum normal dot product for history validation
        history_cap: saturation value of the history length
        sigma_ao: variance-guided AO weight; 0 disables it
    """

    alpha: float = 0.2
    h_min: int = 4
    iterations: int = 5
    sigma_z: float = 1.0
    sigma_n: float = 128.0
    tau_z: float = 0.1
    tau_n: float = 0.9
    history_cap: int = 32
    sigma_ao: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.sigma_z <= 0 or self.sigma_n <= 0:
            raise ValueError("sigma_z and sigma_n must be positive")
        if self.h_min < 1 or self.history_cap < 1:
            raise ValueError("h_min and history_cap must be >= 1")
        if self.tau_z < 0 or not -1.0 <= self.tau_n <= 1.0:
            raise ValueError("tau_z must be >= 0 and tau_n within [-1, 1]")
        if self.sigma_ao < 0:
            raise ValueError(f"sigma_ao must be >= 0, got {self.sigma_ao}")


class SurfaceSample(NamedTuple):
    """Geometry used to decide whether a history tap belongs to the same surface."""

    depth: np.ndarray
    normal: np.ndarray
    mesh_id: np.ndarray


@dataclass(frozen=True, eq=False)
class FilterHistory:
    """
    Accumulated state carried from one frame to the next.

    Attributes:
        mean: (H, W) accumulated value
        moment: (H, W) accumulated second moment
        length: (H, W) history length in frames, 0 for background
        depth, normal, mesh_id: geometry planes of the frame that produced it
        pose: pose of that frame
    """

    mean: np.ndarray
    moment: np.ndarray
    length: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mesh_id: np.ndarray
    pose: CameraPose

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mean.shape


def validate_history(cur: SurfaceSample, prev: SurfaceSample, params: FilterParams):
    """
    Check whether previous-frame samples are consistent with current ones.

    True iff the mesh ids match, the relative depth difference is within
    tau_z and the normals agree to at least tau_n. Works elementwise on
    arrays (normals along the last axis) as well as on single samples.
    """
    z_cur = np.asarray(cur.depth, dtype=np.float64)
    z_prev = np.asarray(prev.depth, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        relative = np.abs(z_cur - z_prev) / np.maximum(z_cur, z_prev)
        depth_ok = relative <= params.tau_z
    normal_ok = np.sum(np.asarray(cur.normal) * np.asarray(prev.normal), axis=-1) >= params.tau_n
    return (np.asarray(cur.mesh_id) == np.asarray(prev.mesh_id)) & depth_ok & normal_ok


def _reprojected_depth(gbuffer: GBuffer, pose: CameraPose) -> np.ndarray:
    depth = np.zeros(gbuffer.shape)
    valid = gbuffer.valid
    if valid.any():
        _, _, z = project_points(gbuffer.world_pos[valid], pose, gbuffer.camera)
        depth[valid] = z
    return depth


def temporal_accumulate(values: np.ndarray, gbuffer: GBuffer, history: Optional[FilterHistory],
                        params: FilterParams) -> Tuple[np.ndarray, np.ndarray, FilterHistory]:
    """
    Blend the current frame into the reprojected history.

    Each pixel follows its motion vector into the previous frame and gathers
    the four bilinear taps that pass validation. With at least one valid tap
    the exponential moving average continues; otherwise the pixel restarts
    from the current value with a history length of 1.

    Args:
        values: (H, W) current values in [0, 1]
        gbuffer: G-buffer of the current frame, motion filled in
        history: state from the previous frame, None for the first frame
        params: filter parameters

    Returns:
        (mean, moment, updated history)
    """
    values = np.asarray(values, dtype=np.float64)
    valid = gbuffer.valid
    shape = gbuffer.shape
    mean = values.copy()
    moment = values * values
    length = np.where(valid, 1, 0).astype(np.int32)

    if history is not None:
        h, w = shape
        xs, ys = pixel_grid(shape)
        px = xs + gbuffer.motion[..., 0]
        py = ys + gbuffer.motion[..., 1]
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        fx = px - x0
        fy = py - y0
        current = SurfaceSample(_reprojected_depth(gbuffer, history.pose), gbuffer.normal, gbuffer.mesh_id)

        weight_sum = np.zeros(shape)
        mean_sum = np.zeros(shape)
        moment_sum = np.zeros(shape)
        prev_length = np.zeros(shape, dtype=np.int32)
        taps = ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                (0, 1, (1 - fx) * fy), (1, 1, fx * fy))
        for ox, oy, bilinear in taps:
            tx = x0 + ox
            ty = y0 + oy
            inside = valid & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & (bilinear > 0)
            cx = np.clip(tx, 0, w - 1)
            cy = np.clip(ty, 0, h - 1)
            previous = SurfaceSample(history.depth[cy, cx], history.normal[cy, cx], history.mesh_id[cy, cx])
            accepted = inside & (previous.mesh_id >= 0) & validate_history(current, previous, params)
            tap_weight = np.where(accepted, bilinear, 0.0)
            weight_sum += tap_weight
            mean_sum += tap_weight * history.mean[cy, cx]
            moment_sum += tap_weight * history.moment[cy, cx]
            prev_length = np.maximum(prev_length, np.where(accepted, history.length[cy, cx], 0))

        reprojected = weight_sum > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            prev_mean = mean_sum / weight_sum
            prev_moment = moment_sum / weight_sum
        if params.alpha < 1.0:
            mean = np.where(reprojected, prev_mean + params.alpha * (values - prev_mean), mean)
            moment = np.where(reprojected, prev_moment + params.alpha * (values * values - prev_moment), moment)
        length = np.where(reprojected, np.minimum(prev_length + 1, params.history_cap), length).astype(np.int32)
        logger.debug("frame %d: %d of %d pixels reprojected", gbuffer.frame_id,
                     int(reprojected.sum()), int(valid.sum()))

    updated = FilterHistory(mean, moment, length, gbuffer.depth.copy(), gbuffer.normal.copy(),
                            gbuffer.mesh_id.copy(), gbuffer.pose)
    return mean, moment, updated


def _shift(a: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    """out[y, x] = a[y + dy, x + dx], `fill` outside the image."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    out[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)] = \
        a[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)]
    return out


def depth_gradient(gbuffer: GBuffer) -> np.ndarray:
    """Forward-difference screen-space depth gradient magnitude, floored at 1e-4."""
    valid = gbuffer.valid
    depth = np.where(valid, gbuffer.depth, 0.0)
    gx = np.where(valid & _shift(valid, 1, 0, False), _shift(depth, 1, 0, 0.0) - depth, 0.0)
    gy = np.where(valid & _shift(valid, 0, 1, False), _shift(depth, 0, 1, 0.0) - depth, 0.0)
    return np.maximum(np.hypot(gx, gy), MIN_DEPTH_GRADIENT)


class _Geometry:
    """Per-frame planes shared by every edge-stopping evaluation."""

    def __init__(self, gbuffer: GBuffer):
        self.valid = gbuffer.valid
        self.depth = np.where(self.valid, gbuffer.depth, 0.0)
        self.normal = gbuffer.normal
        self.gradient = depth_gradient(gbuffer)

    def weight(self, dx: int, dy: int, scale: float, params: FilterParams) -> np.ndarray:
        """w_z * w_n between every pixel and its neighbour at (dx, dy); 0 if either is invalid."""
        neighbour_valid = _shift(self.valid, dx, dy, False)
        dz = np.abs(self.depth - _shift(self.depth, dx, dy, 0.0))
        w_z = np.exp(-dz / (params.sigma_z * self.gradient * scale + _EPS))
        cos_n = np.sum(self.normal * _shift(self.normal, dx, dy, 0.0), axis=-1)
        w_n = np.maximum(0.0, cos_n) ** params.sigma_n
        return np.where(self.valid & neighbour_valid, w_z * w_n, 0.0)


def estimate_variance(mean: np.ndarray, moment: np.ndarray, history: FilterHistory,
                      gbuffer: GBuffer, params: FilterParams) -> np.ndarray:
    """
    Per-pixel variance of the accumulated signal.

    Pixels with history length >= h_min use the temporal moments,
    max(0, m2 - mean^2). Younger pixels use the weighted variance of the
    accumulated values over a 7x7 neighbourhood, weighted by depth and normal
    similarity only.
    """
    temporal = np.maximum(0.0, moment - mean * mean)
    young = history.length < params.h_min
    if not young.any():
        return np.where(gbuffer.valid, temporal, 0.0)

    geometry = _Geometry(gbuffer)
    weight_sum = np.zeros(gbuffer.shape)
    first = np.zeros(gbuffer.shape)
    second = np.zeros(gbuffer.shape)
    r = SPATIAL_VARIANCE_RADIUS
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            weight = geometry.weight(dx, dy, max(abs(dx), abs(dy), 1), params)
            neighbour = _shift(mean, dx, dy, 0.0)
            weight_sum += weight
            first += weight * neighbour
            second += weight * neighbour * neighbour
    with np.errstate(invalid="ignore", divide="ignore"):
        local_mean = first / weight_sum
        spatial = np.maximum(0.0, second / weight_sum - local_mean * local_mean)
    spatial = np.where(weight_sum > 0, spatial, 0.0)
    return np.where(gbuffer.valid, np.where(young, spatial, temporal), 0.0)


def _blurred_variance(variance: np.ndarray) -> np.ndarray:
    kernel = np.outer([0.25, 0.5, 0.25], [0.25, 0.5, 0.25])
    return ndimage.convolve(variance, kernel, mode="nearest")


def atrous_pass(values: np.ndarray, variance: np.ndarray, gbuffer: GBuffer, step: int,
                params: FilterParams, geometry: Optional[_Geometry] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    One edge-aware a-trous iteration with taps dilated by `step`.

    Tap weight = B3 coefficient * w_z * w_n (times the optional AO weight).
    Values are weight-normalized; variance propagates with squared
    normalized weights. Background pixels pass through unchanged.

    Raises:
        ValueError: If step < 1
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    geometry = geometry or _Geometry(gbuffer)
    values = np.asarray(values, dtype=np.float64)
    guide = np.sqrt(_blurred_variance(variance)) if params.sigma_ao > 0 else None

    weight_sum = np.zeros(values.shape)
    value_sum = np.zeros(values.shape)
    variance_sum = np.zeros(values.shape)
    for ky, cy in enumerate(B3_KERNEL):
        for kx, cx in enumerate(B3_KERNEL):
            dx = (kx - 2) * step
            dy = (ky - 2) * step
            weight = cx * cy * geometry.weight(dx, dy, step, params)
            neighbour = _shift(values, dx, dy, 0.0)
            if guide is not None:
                weight = weight * np.exp(-np.abs(values - neighbour) / (params.sigma_ao * guide + _EPS))
            weight_sum += weight
            value_sum += weight * neighbour
            variance_sum += weight * weight * _shift(variance, dx, dy, 0.0)

    filled = geometry.valid & (weight_sum > 0)
    safe = np.where(filled, weight_sum, 1.0)
    out_values = np.where(filled, value_sum / safe, values)
    out_variance = np.where(filled, variance_sum / (safe * safe), variance)
    return np.clip(out_values, 0.0, 1.0), out_variance


def filter_values(values: np.ndarray, gbuffer: GBuffer, history: Optional[FilterHistory],
                  params: FilterParams) -> Tuple[np.ndarray, FilterHistory]:
    """Run the full temporal + variance + a-trous chain on a [0, 1] scalar plane."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != gbuffer.shape:
        raise DimensionMismatchError(f"plane {values.shape} does not match G-buffer {gbuffer.shape}")
    if history is not None and history.shape != gbuffer.shape:
        raise DimensionMismatchError(f"history {history.shape} does not match G-buffer {gbuffer.shape}")

    mean, moment, history = temporal_accumulate(values, gbuffer, history, params)
    variance = estimate_variance(mean, moment, history, gbuffer, params)
    geometry = _Geometry(gbuffer)
    filtered = mean
    for i in range(params.iterations):
        filtered, variance = atrous_pass(filtered, variance, gbuffer, 1 << i, params, geometry)
    filtered = np.where(gbuffer.valid, filtered, values)
    return np.clip(filtered, 0.0, 1.0), history


def requantize(values: np.ndarray, rays: int) -> np.ndarray:
    """Round O * N half away from zero and clamp to [0, N]."""
    return np.clip(np.floor(np.asarray(values) * rays + 0.5), 0, rays).astype(np.uint8)


def svgf_filter(ao: AoBuffer, gbuffer: GBuffer, history: Optional[FilterHistory],
                params: Optional[FilterParams] = None) -> Tuple[AoBuffer, FilterHistory]:
    """
    Denoise an AO buffer.

    Args:
        ao: raw AO counts of the frame
        gbuffer: G-buffer of the same frame, motion filled in
        history: state returned for the previous frame, or None
        params: filter parameters, defaults when omitted

    Returns:
        (filtered AoBuffer, updated history)

    Raises:
        DimensionMismatchError: If the AO buffer, G-buffer or history disagree in size
    """
    params = params or FilterParams()
    if ao.shape != gbuffer.shape:
        raise DimensionMismatchError(f"AO buffer {ao.shape} does not match G-buffer {gbuffer.shape}")
    filtered, history = filter_values(ao.occlusion_factor(), gbuffer, history, params)
    return ao.with_counts(requantize(filtered, ao.rays), filtered=True), history


@dataclass
class SvgfFilter:
    """One filter stream: parameters plus the history it advances frame by frame."""

    params: FilterParams = field(default_factory=FilterParams)
    history: Optional[FilterHistory] = None

    def reset(self) -> None:
        self.history = None

    def _usable_history(self, gbuffer: GBuffer) -> Optional[FilterHistory]:
        if self.history is not None and self.history.shape != gbuffer.shape:
            logger.warning("resolution changed to %s, dropping filter history", gbuffer.shape)
            self.history = None
        return self.history

    def filter(self, ao: AoBuffer, gbuffer: GBuffer) -> AoBuffer:
        filtered, self.history = svgf_filter(ao, gbuffer, self._usable_history(gbuffer), self.params)
        return filtered

    def filter_values(self, values: np.ndarray, gbuffer: GBuffer) -> np.ndarray:
        filtered, self.history = filter_values(values, gbuffer, self._usable_history(gbuffer), self.params)
        return filtered


class ShadowPlaneFilter:
    """
    Filters each light's visibility plane as a 0/1 scalar with its own
    filter stream, then re-binarizes at 0.5.
    """

    def __init__(self, params: Optional[FilterParams] = None):
        self.params = params or FilterParams()
        self.filters: Dict[int, SvgfFilter] = {}

    def filter(self, visibility: VisibilityBuffer, gbuffer: GBuffer) -> VisibilityBuffer:
        bits = np.zeros(visibility.shape, dtype=np.uint8)
        for i in range(visibility.light_count):
            stream = self.filters.setdefault(i, SvgfFilter(self.params))
            plane = stream.filter_values(visibility.light_visible(i).astype(np.float64), gbuffer)
            bits |= (plane >= 0.5).astype(np.uint8) << np.uint8(i)
        background = ~gbuffer.valid
        bits[background] = visibility.bits[background]
        return replace(visibility, bits=bits)
