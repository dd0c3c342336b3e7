"""
Deterministic per-pixel sampling.

Every random number is a pure function of (seed, stream, frame_id,
pixel_index, ray_index, dimension), computed with a vectorized splitmix64
hash. Tracing can therefore be split across tiles or repeated with
different radii without changing a single sample.
"""

from dataclasses import dataclass

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0

STREAM_VISIBILITY = 1
STREAM_AO = 2


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> _U64(30))) * _M1
    x = (x ^ (x >> _U64(27))) * _M2
    return x ^ (x >> _U64(31))


def _u64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.int64).astype(np.uint64)


@dataclass(frozen=True)
class SamplerState:
    """
    Counter-based sampler for one frame of one stream.

    Attributes:
        seed: run seed
        frame_id: frame the samples belong to
        stream: separates visibility, AO and reference samples
    """

    seed: int
    frame_id: int = 0
    stream: int = STREAM_AO

    def for_frame(self, frame_id: int) -> "SamplerState":
        return SamplerState(self.seed, frame_id, self.stream)

    def for_stream(self, stream: int) -> "SamplerState":
        return SamplerState(self.seed, self.frame_id, stream)

    def uniform(self, pixels, ray, dim: int) -> np.ndarray:
        """
        Uniform floats in [0, 1) for every (pixel, ray) pair.

        Args:
            pixels: array of pixel indices
            ray: scalar or array broadcastable against `pixels`
            dim: sample dimension (0, 1, ...)
        """
        with np.errstate(over="ignore"):
            h = _mix(_u64(self.seed) * _GOLDEN + _u64(self.stream))
            h = _mix(h ^ (_u64(self.frame_id) + _GOLDEN))
            h = _mix(h ^ (_u64(pixels) + _GOLDEN))
            h = _mix(h ^ (_u64(ray) * _M1 + _GOLDEN))
            h = _mix(h ^ (_u64(dim) + _M2))
        return (h >> _U64(11)).astype(np.float64) * _INV_2_53

    def uniform2(self, pixels, ray) -> np.ndarray:
        """(n, 2) uniforms from dimensions 0 and 1."""
        pixels = np.asarray(pixels)
        return np.stack([self.uniform(pixels, ray, 0), self.uniform(pixels, ray, 1)], axis=-1)


def orthonormal_basis(normals: np.ndarray):
    """
    Tangent frames for unit normals (branchless construction).

    Returns:
        (tangent, bitangent) arrays with the same shape as `normals`
    """
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    tangent = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bitangent = np.stack([b, sign + y * y * a, -y], axis=-1)
    return tangent, bitangent


def _to_world(local: np.ndarray, axis: np.ndarray) -> np.ndarray:
    tangent, bitangent = orthonormal_basis(axis)
    out = local[..., 0:1] * tangent + local[..., 1:2] * bitangent + local[..., 2:3] * axis
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def cone_directions(axis, half_angle, u) -> np.ndarray:
    """
    Map uniforms `u` (n, 2) to directions uniformly distributed over the
    spherical cap of `half_angle` around `axis`.
    """
    axis = np.broadcast_to(np.asarray(axis, dtype=np.float64), u.shape[:-1] + (3,))
    cos_max = np.cos(np.asarray(half_angle, dtype=np.float64))
    cos_theta = 1.0 - u[..., 0] * (1.0 - cos_max)
    sin_theta = np.sqrt(np.clip(1.0 - cos_theta * cos_theta, 0.0, 1.0))
    phi = 2.0 * np.pi * u[..., 1]
    local = np.stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta], axis=-1)
    out = _to_world(local, axis)
    # A zero-angle cone returns the axis bit-for-bit.
    degenerate = np.broadcast_to(np.asarray(half_angle) == 0.0, out.shape[:-1])
    return np.where(degenerate[..., None], axis, out)


def cosine_hemisphere_directions(normal, u) -> np.ndarray:
    """Map uniforms `u` (n, 2) to cosine-weighted directions around `normal`."""
    normal = np.broadcast_to(np.asarray(normal, dtype=np.float64), u.shape[:-1] + (3,))
    r = np.sqrt(u[..., 0])
    phi = 2.0 * np.pi * u[..., 1]
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.clip(1.0 - u[..., 0], 0.0, 1.0))], axis=-1)
    return _to_world(local, normal)


def sample_cone(axis, half_angle, sampler: SamplerState, pixels=0, ray=0) -> np.ndarray:
    """
    Uniform direction inside the cone of `half_angle` around `axis`.

    Args:
        axis: unit vector (3,) or (n, 3)
        half_angle: radians in [0, pi/2], scalar or (n,)
        sampler: sampler for this frame
        pixels: pixel indices selecting the sample streams
        ray: ray index within the pixel

    Returns:
        Unit vectors whose angle to the axis is <= half_angle
    """
    if np.any(np.asarray(half_angle) < 0) or np.any(np.asarray(half_angle) > np.pi / 2 + 1e-12):
        raise ValueError("half_angle must be within [0, pi/2]")
    return cone_directions(axis, half_angle, sampler.uniform2(pixels, ray))


def sample_cosine_hemisphere(normal, sampler: SamplerState, pixels=0, ray=0) -> np.ndarray:
    """Cosine-weighted direction in the hemisphere around `normal`."""
    return cosine_hemisphere_directions(normal, sampler.uniform2(pixels, ray))
