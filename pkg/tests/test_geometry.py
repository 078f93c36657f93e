import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from surs.errors import ValidationError
from surs.geometry import (BOUNDARY_BAND, boundary_flags, build_bvh, occupancy,
                           point_to_surface, point_to_surface_bruteforce, winding_number)
from surs.mesh import TriMesh, box

from oracles import ray_parity


def test_cube_inside_outside():
    b = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    np.testing.assert_array_equal(occupancy(b, [[0, 0, 0], [2, 0, 0]]), [1, 0])


def test_winding_number_values():
    b = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    w = winding_number(b, [[0, 0, 0], [3, 1, -2]])
    assert w[0] == pytest.approx(1.0, abs=1e-12)
    assert w[1] == pytest.approx(0.0, abs=1e-12)


def test_occupancy_matches_ray_parity(sphere4, rng):
    pts = rng.uniform(-1.5, 1.5, (3000, 3))
    dist, _, _ = point_to_surface(sphere4, build_bvh(sphere4), pts)
    far = dist > 1e-4
    dirs = [[0.31, 0.72, 0.62], [-0.55, 0.12, 0.83], [0.66, -0.71, 0.24]]
    ref = ray_parity(sphere4, pts[far], dirs)
    agree = np.mean(occupancy(sphere4, pts[far]) == ref)
    assert agree >= 0.999


@given(st.floats(0.1, 50.0), arrays(np.float64, (20, 3), elements=st.floats(-2, 2)))
def test_occupancy_scale_invariant(s, pts):
    b = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    w = winding_number(b, pts)
    keep = ~boundary_flags(w)
    big = TriMesh(b.vertices * s, b.faces)
    np.testing.assert_array_equal(occupancy(b, pts)[keep], occupancy(big, pts * s)[keep])


def test_boundary_band():
    f = boundary_flags(np.array([0.5, 0.5 + BOUNDARY_BAND / 2, 0.5 + 2 * BOUNDARY_BAND]))
    np.testing.assert_array_equal(f, [True, True, False])


def test_exact_half_is_outside():
    # a point on a face of the cube has w = 0.5 and is labeled outside
    b = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    w = winding_number(b, [[0.5, 0.1, 0.2]])
    assert w[0] == pytest.approx(0.5, abs=1e-9)


def test_point_to_surface_sphere(sphere4):
    d, q, f = point_to_surface(sphere4, build_bvh(sphere4), np.array([2.0, 0.0, 0.0]))
    assert abs(d - 1.0) < 0.01
    d0, _, _ = point_to_surface(sphere4, build_bvh(sphere4), sphere4.vertices[17])
    assert d0 == 0.0


def test_bvh_equals_bruteforce_on_cube(rng):
    b = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    pts, _ = b.sample_surface(1000, rng)
    pts = pts + rng.normal(0, 0.1, pts.shape)
    bvh = build_bvh(b, leaf_size=2)
    for x, y in zip(point_to_surface(b, bvh, pts), point_to_surface_bruteforce(b, pts)):
        np.testing.assert_array_equal(x, y)


def test_bvh_equals_bruteforce_on_sphere(sphere4, rng):
    pts = rng.uniform(-1.3, 1.3, (800, 3))
    a = point_to_surface(sphere4, build_bvh(sphere4), pts)
    b = point_to_surface_bruteforce(sphere4, pts)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_bvh_structure(sphere4):
    bvh = build_bvh(sphere4)
    leaves = bvh.leaves()
    faces = np.concatenate([bvh.order[bvh.start[n]:bvh.start[n] + bvh.count[n]] for n in leaves])
    np.testing.assert_array_equal(np.sort(faces), np.arange(sphere4.n_faces))
    for n in range(bvh.n_nodes):
        if bvh.left[n] >= 0:
            for c in (bvh.left[n], bvh.right[n]):
                assert np.all(bvh.lo[c] >= bvh.lo[n]) and np.all(bvh.hi[c] <= bvh.hi[n])


def test_surface_samples_have_zero_distance(sphere4, rng):
    pts, _ = sphere4.sample_surface(300, rng)
    d, _, _ = point_to_surface(sphere4, build_bvh(sphere4), pts)
    assert d.max() < 1e-12


def test_empty_mesh_rejected():
    m = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    with pytest.raises(ValidationError):
        point_to_surface(m, None, [0, 0, 0])
