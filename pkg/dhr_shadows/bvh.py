"""
Bounding Volume Hierarchy Module

This module provides the triangle geometry substrate (Triangle, TriangleMesh,
Ray, Hit) and the Bvh used for every ray query in the package: closest-hit for
primary rays and any-hit for shadow and ambient-occlusion rays.

Queries are batched: a wavefront of (ray, node) pairs is pushed through the
tree with numpy, so one call traces tens of thousands of rays. The single-ray
functions `intersect` and `occluded` are thin wrappers over the batch path.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import SceneError

logger = logging.getLogger(__name__)

T_MIN = 1e-6
MAX_LEAF_SIZE = 4
# Slab tests use slightly inflated boxes so flat (axis-aligned) leaves never
# reject a hit that the triangle test accepts.
_BOX_PAD = 1e-7
_CHUNK = 1 << 16


@dataclass(frozen=True)
class Triangle:
    """A single triangle with the attributes the G-buffer needs."""

    v0: Tuple[float, float, float]
    v1: Tuple[float, float, float]
    v2: Tuple[float, float, float]
    mesh_id: int
    albedo: Tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if self.mesh_id < 0:
            raise SceneError(f"mesh_id must be >= 0, got {self.mesh_id}")
        e1 = np.subtract(self.v1, self.v0)
        e2 = np.subtract(self.v2, self.v0)
        if np.linalg.norm(np.cross(e1, e2)) <= 1e-12:
            raise SceneError(f"degenerate triangle {self.v0}, {self.v1}, {self.v2}")


@dataclass(frozen=True)
class Ray:
    origin: Tuple[float, float, float]
    direction: Tuple[float, float, float]
    t_max: float = np.inf

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, got {self.direction}")
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")


@dataclass(frozen=True)
class Hit:
    t: float
    mesh_id: int
    normal: np.ndarray
    albedo: np.ndarray
    primitive: int


class TriangleMesh:
    """
    Structure-of-arrays triangle storage.

    Attributes:
        v0, v1, v2: (T, 3) float64 vertex arrays
        mesh_id: (T,) int32
        albedo: (T, 3) float64
        e1, e2: precomputed edges v1 - v0 and v2 - v0
        normal: (T, 3) unit geometric normals following the winding order
    """

    def __init__(self, v0, v1, v2, mesh_id, albedo):
        self.v0 = np.ascontiguousarray(v0, dtype=np.float64).reshape(-1, 3)
        self.v1 = np.ascontiguousarray(v1, dtype=np.float64).reshape(-1, 3)
        self.v2 = np.ascontiguousarray(v2, dtype=np.float64).reshape(-1, 3)
        self.mesh_id = np.ascontiguousarray(mesh_id, dtype=np.int32).reshape(-1)
        self.albedo = np.ascontiguousarray(albedo, dtype=np.float64).reshape(-1, 3)
        count = len(self.v0)
        if not (len(self.v1) == len(self.v2) == len(self.mesh_id) == len(self.albedo) == count):
            raise SceneError("triangle arrays have inconsistent lengths")
        if np.any(self.mesh_id < 0):
            raise SceneError("mesh_id must be >= 0")
        self.e1 = self.v1 - self.v0
        self.e2 = self.v2 - self.v0
        cross = np.cross(self.e1, self.e2)
        area2 = np.linalg.norm(cross, axis=1)
        if np.any(area2 <= 1e-12):
            bad = int(np.argmax(area2 <= 1e-12))
            raise SceneError(f"triangle {bad} is degenerate (zero area)")
        self.normal = cross / area2[:, None]
        for array in (self.v0, self.v1, self.v2, self.mesh_id, self.albedo,
                      self.e1, self.e2, self.normal):
            array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.v0)

    @classmethod
    def from_triangles(cls, triangles: Sequence[Triangle]) -> "TriangleMesh":
        if not triangles:
            raise SceneError("at least one triangle is required")
        return cls(
            [t.v0 for t in triangles],
            [t.v1 for t in triangles],
            [t.v2 for t in triangles],
            [t.mesh_id for t in triangles],
            [t.albedo for t in triangles],
        )

    @classmethod
    def concatenate(cls, meshes: Sequence["TriangleMesh"]) -> "TriangleMesh":
        return cls(
            np.concatenate([m.v0 for m in meshes]),
            np.concatenate([m.v1 for m in meshes]),
            np.concatenate([m.v2 for m in meshes]),
            np.concatenate([m.mesh_id for m in meshes]),
            np.concatenate([m.albedo for m in meshes]),
        )

    def triangle(self, index: int) -> Triangle:
        return Triangle(
            tuple(self.v0[index]), tuple(self.v1[index]), tuple(self.v2[index]),
            int(self.mesh_id[index]), tuple(self.albedo[index]),
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.minimum(np.minimum(self.v0, self.v1), self.v2)
        hi = np.maximum(np.maximum(self.v0, self.v1), self.v2)
        return lo, hi


class Bvh:
    """
    Flattened bounding volume hierarchy over a TriangleMesh.

    Node arrays are indexed by node id; node 0 is the root. Inner nodes have
    `left`/`right` child ids; leaves have left == -1 and own the primitive
    range `order[start:start + count]`.
    """

    def __init__(self, mesh: TriangleMesh, node_min, node_max, left, right, start, count, order):
        self.mesh = mesh
        self.node_min = node_min
        self.node_max = node_max
        self.left = left
        self.right = right
        self.start = start
        self.count = count
        self.order = order
        self.max_leaf_size = int(count.max()) if len(count) else 0
        for array in (node_min, node_max, left, right, start, count, order):
            array.setflags(write=False)

    @property
    def node_count(self) -> int:
        return len(self.left)

    def leaves(self) -> List[np.ndarray]:
        """Return the primitive index set of every leaf, in node order."""
        return [
            self.order[self.start[n]:self.start[n] + self.count[n]]
            for n in range(self.node_count)
            if self.left[n] < 0
        ]


def build_bvh(triangles: Union[Sequence[Triangle], TriangleMesh],
              max_leaf_size: int = MAX_LEAF_SIZE) -> Bvh:
    """
    Build a BVH by median split over the longest axis of each node's box.

    Args:
        triangles: a sequence of Triangle or a TriangleMesh
        max_leaf_size: largest number of triangles stored in a leaf

    Returns:
        The constructed Bvh

    Raises:
        SceneError: If the triangle list is empty
    """
    if isinstance(triangles, TriangleMesh):
        mesh = triangles
    else:
        mesh = TriangleMesh.from_triangles(list(triangles))
    if len(mesh) == 0:
        raise SceneError("cannot build a BVH over zero triangles")

    tri_lo, tri_hi = mesh.bounds()
    centroid = (mesh.v0 + mesh.v1 + mesh.v2) / 3.0
    order = np.arange(len(mesh), dtype=np.int64)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node(lo_index, hi_index):
        prims = order[lo_index:hi_index]
        node_min.append(tri_lo[prims].min(axis=0))
        node_max.append(tri_hi[prims].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo_index)
        count.append(hi_index - lo_index)
        return len(left) - 1

    stack = [(new_node(0, len(mesh)), 0, len(mesh))]
    while stack:
        node, lo_index, hi_index = stack.pop()
        n = hi_index - lo_index
        if n <= max_leaf_size:
            continue
        extent = node_max[node] - node_min[node]
        axis = int(np.argmax(extent))
        prims = order[lo_index:hi_index]
        ranked = prims[np.argsort(centroid[prims, axis], kind="stable")]
        order[lo_index:hi_index] = ranked
        mid = lo_index + n // 2
        left_id = new_node(lo_index, mid)
        right_id = new_node(mid, hi_index)
        left[node], right[node] = left_id, right_id
        count[node] = 0
        stack.append((right_id, mid, hi_index))
        stack.append((left_id, lo_index, mid))

    bvh = Bvh(
        mesh,
        np.array(node_min, dtype=np.float64),
        np.array(node_max, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64),
        np.array(count, dtype=np.int64),
        order,
    )
    logger.debug("built BVH: %d triangles, %d nodes", len(mesh), bvh.node_count)
    return bvh


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def moller_trumbore(origins, directions, v0, e1, e2) -> np.ndarray:
    """
    Two-sided ray/triangle intersection for paired rows.

    Returns:
        Hit distance per row, +inf where the ray misses the triangle
    """
    p = np.cross(directions, e2)
    det = _dot(e1, p)
    valid = np.abs(det) > 1e-12
    inv_det = 1.0 / np.where(valid, det, 1.0)
    s = origins - v0
    u = _dot(s, p) * inv_det
    q = np.cross(s, e1)
    v = _dot(directions, q) * inv_det
    t = _dot(e2, q) * inv_det
    hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return np.where(hit, t, np.inf)


def _safe_inverse(directions):
    tiny = np.where(directions < 0, -1e-30, 1e-30)
    return 1.0 / np.where(np.abs(directions) < 1e-30, tiny, directions)


def _traverse(bvh: Bvh, origins, directions, t_max, any_hit: bool):
    n = len(origins)
    mesh = bvh.mesh
    best_t = np.array(t_max, dtype=np.float64, copy=True)
    best_prim = np.full(n, -1, dtype=np.int64)
    found = np.zeros(n, dtype=bool)
    inv_dir = _safe_inverse(directions)

    ray_ids = np.arange(n, dtype=np.int64)
    nodes = np.zeros(n, dtype=np.int64)
    while ray_ids.size:
        o = origins[ray_ids]
        inv = inv_dir[ray_ids]
        t0 = (bvh.node_min[nodes] - _BOX_PAD - o) * inv
        t1 = (bvh.node_max[nodes] + _BOX_PAD - o) * inv
        t_near = np.minimum(t0, t1).max(axis=1)
        t_far = np.maximum(t0, t1).min(axis=1)
        keep = (t_near <= t_far) & (t_far >= 0.0) & (t_near <= best_t[ray_ids])
        if any_hit:
            keep &= ~found[ray_ids]
        ray_ids, nodes = ray_ids[keep], nodes[keep]

        is_leaf = bvh.left[nodes] < 0
        leaf_rays, leaf_nodes = ray_ids[is_leaf], nodes[is_leaf]
        for k in range(bvh.max_leaf_size):
            has = bvh.count[leaf_nodes] > k
            rays = leaf_rays[has]
            if rays.size == 0:
                continue
            prims = bvh.order[bvh.start[leaf_nodes[has]] + k]
            t = moller_trumbore(
                origins[rays], directions[rays], mesh.v0[prims], mesh.e1[prims], mesh.e2[prims]
            )
            closer = (t > T_MIN) & (t < best_t[rays])
            if not closer.any():
                continue
            rays, prims, t = rays[closer], prims[closer], t[closer]
            if any_hit:
                found[rays] = True
                best_t[rays] = np.minimum(best_t[rays], t)
                continue
            np.minimum.at(best_t, rays, t)
            winner = t == best_t[rays]
            best_prim[rays[winner]] = prims[winner]

        inner_rays, inner_nodes = ray_ids[~is_leaf], nodes[~is_leaf]
        ray_ids = np.concatenate([inner_rays, inner_rays])
        nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])

    if any_hit:
        return found
    return np.where(best_prim >= 0, best_t, np.inf), best_prim


def _as_batch(origins, directions, t_max):
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(origins),))
    return origins, directions, t_max


def intersect_batch(bvh: Bvh, origins, directions, t_max=np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Closest-hit query for many rays.

    Args:
        bvh: acceleration structure
        origins, directions: (R, 3) arrays; directions must be unit length
        t_max: scalar or (R,) upper bound on the hit distance

    Returns:
        (t, primitive) arrays; t is +inf and primitive -1 for misses
    """
    origins, directions, t_max = _as_batch(origins, directions, t_max)
    t_out = np.full(len(origins), np.inf)
    prim_out = np.full(len(origins), -1, dtype=np.int64)
    for lo in range(0, len(origins), _CHUNK):
        hi = lo + _CHUNK
        t_out[lo:hi], prim_out[lo:hi] = _traverse(
            bvh, origins[lo:hi], directions[lo:hi], t_max[lo:hi], any_hit=False
        )
    return t_out, prim_out


def occluded_batch(bvh: Bvh, origins, directions, t_max) -> np.ndarray:
    """Any-hit query: True where something lies strictly between T_MIN and t_max."""
    origins, directions, t_max = _as_batch(origins, directions, t_max)
    out = np.zeros(len(origins), dtype=bool)
    for lo in range(0, len(origins), _CHUNK):
        hi = lo + _CHUNK
        out[lo:hi] = _traverse(bvh, origins[lo:hi], directions[lo:hi], t_max[lo:hi], any_hit=True)
    return out


def facing_normals(mesh: TriangleMesh, prims, directions) -> np.ndarray:
    """Geometric normals of `prims`, flipped to face against `directions`."""
    normals = mesh.normal[prims]
    flip = _dot(normals, directions) > 0.0
    return np.where(flip[:, None], -normals, normals)


def intersect(bvh: Bvh, ray: Ray) -> Optional[Hit]:
    """Closest hit along `ray`, or None."""
    t, prim = intersect_batch(bvh, [ray.origin], [ray.direction], ray.t_max)
    if prim[0] < 0:
        return None
    p = int(prim[0])
    normal = facing_normals(bvh.mesh, prim, np.asarray([ray.direction], dtype=np.float64))[0]
    return Hit(float(t[0]), int(bvh.mesh.mesh_id[p]), normal, bvh.mesh.albedo[p].copy(), p)


def occluded(bvh: Bvh, ray: Ray) -> bool:
    return bool(occluded_batch(bvh, [ray.origin], [ray.direction], ray.t_max)[0])


def linear_scan(mesh: TriangleMesh, origins, directions, t_max=np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Brute-force closest hit over every triangle, used as the BVH oracle.

    Returns:
        (t, primitive) arrays with the same conventions as intersect_batch
    """
    origins, directions, t_max = _as_batch(origins, directions, t_max)
    count = len(mesh)
    t_out = np.full(len(origins), np.inf)
    prim_out = np.full(len(origins), -1, dtype=np.int64)
    step = max(1, (1 << 20) // count)
    for lo in range(0, len(origins), step):
        o = origins[lo:lo + step]
        d = directions[lo:lo + step]
        r = len(o)
        t = moller_trumbore(
            np.repeat(o, count, axis=0), np.repeat(d, count, axis=0),
            np.tile(mesh.v0, (r, 1)), np.tile(mesh.e1, (r, 1)), np.tile(mesh.e2, (r, 1)),
        ).reshape(r, count)
        t = np.where((t > T_MIN) & (t < t_max[lo:lo + step, None]), t, np.inf)
        prim = np.argmin(t, axis=1)
        best = t[np.arange(r), prim]
        t_out[lo:lo + step] = best
        prim_out[lo:lo + step] = np.where(np.isfinite(best), prim, -1)
    return t_out, prim_out
