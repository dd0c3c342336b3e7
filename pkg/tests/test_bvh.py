"""
Tests for the BVH and ray/triangle queries.
"""

import numpy as np
import pytest

from dhr_shadows.bvh import (Ray, Triangle, TriangleMesh, build_bvh, intersect, intersect_batch,
                             linear_scan, occluded, occluded_batch)
from dhr_shadows.errors import SceneError
from dhr_shadows.scene import generate_scene


def random_rays(count, seed=0, spread=6.0):
    rng = np.random.default_rng(seed)
    origins = rng.uniform(-spread, spread, size=(count, 3)) + np.array([0.0, 2.0, 0.0])
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def test_bvh_matches_linear_scan_exactly():
    """10^4 random rays: the BVH returns the same hit distance and triangle as brute force."""
    scene = generate_scene("columns-hall")
    origins, dirs = random_rays(10_000, seed=3)
    t_bvh, prim_bvh = intersect_batch(scene.bvh, origins, dirs)
    t_ref, prim_ref = linear_scan(scene.mesh, origins, dirs)

    np.testing.assert_array_equal(np.isfinite(t_bvh), np.isfinite(t_ref))
    hit = np.isfinite(t_ref)
    np.testing.assert_allclose(t_bvh[hit], t_ref[hit], rtol=1e-12)
    # Coplanar ties may pick either triangle of a quad; mesh ids still agree.
    np.testing.assert_array_equal(scene.mesh.mesh_id[prim_bvh[hit]], scene.mesh.mesh_id[prim_ref[hit]])
    print(f"✓ BVH agrees with linear scan on {len(origins)} rays ({int(hit.sum())} hits)")


def test_any_hit_agrees_with_closest_hit():
    scene = generate_scene("box-room")
    origins, dirs = random_rays(2000, seed=5, spread=3.0)
    t_max = np.full(len(origins), 2.0)
    t, _ = intersect_batch(scene.bvh, origins, dirs)
    np.testing.assert_array_equal(occluded_batch(scene.bvh, origins, dirs, t_max), t < t_max)


def test_every_triangle_in_exactly_one_leaf():
    scene = generate_scene("columns-hall")
    leaves = scene.bvh.leaves()
    owned = np.concatenate(leaves)
    assert sorted(owned.tolist()) == list(range(len(scene.mesh)))
    assert all(len(leaf) <= 4 for leaf in leaves)


def test_node_boxes_contain_their_primitives():
    scene = generate_scene("box-room")
    bvh = scene.bvh
    lo, hi = scene.mesh.bounds()
    for n in range(bvh.node_count):
        if bvh.left[n] >= 0:
            continue
        prims = bvh.order[bvh.start[n]:bvh.start[n] + bvh.count[n]]
        assert np.all(bvh.node_min[n] <= lo[prims].min(axis=0))
        assert np.all(bvh.node_max[n] >= hi[prims].max(axis=0))


def test_single_triangle_hit_and_miss():
    bvh = build_bvh([Triangle((-1, -1, -2), (1, -1, -2), (0, 1, -2), mesh_id=7, albedo=(0.1, 0.2, 0.3))])
    hit = intersect(bvh, Ray((0, 0, 0), (0, 0, -1)))
    assert hit is not None
    assert hit.t == pytest.approx(2.0)
    assert hit.mesh_id == 7
    np.testing.assert_allclose(hit.normal, [0, 0, 1])
    assert intersect(bvh, Ray((0, 0, 0), (0, 0, 1))) is None
    assert not occluded(bvh, Ray((0, 0, 0), (0, 0, -1), t_max=1.5))
    assert occluded(bvh, Ray((0, 0, 0), (0, 0, -1), t_max=2.5))


def test_hits_behind_t_min_are_ignored():
    bvh = build_bvh([Triangle((-1, -1, 0), (1, -1, 0), (0, 1, 0), 0)])
    t, prim = intersect_batch(bvh, [[0.0, 0.0, 0.0]], [[0.0, 0.0, -1.0]])
    assert prim[0] == -1 and np.isinf(t[0])


def test_degenerate_triangle_rejected():
    with pytest.raises(SceneError) as exc_info:
        Triangle((0, 0, 0), (1, 1, 1), (2, 2, 2), 0)
    assert "degenerate" in str(exc_info.value)


def test_empty_mesh_rejected():
    with pytest.raises(SceneError):
        build_bvh([])


def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 2))


def test_mesh_concatenate_keeps_order():
    a = TriangleMesh.from_triangles([Triangle((0, 0, 0), (1, 0, 0), (0, 1, 0), 1)])
    b = TriangleMesh.from_triangles([Triangle((0, 0, 1), (1, 0, 1), (0, 1, 1), 2)])
    merged = TriangleMesh.concatenate([a, b])
    assert len(merged) == 2
    assert merged.mesh_id.tolist() == [1, 2]
    assert merged.triangle(1).v0 == (0.0, 0.0, 1.0)
