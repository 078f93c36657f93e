import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from surs.errors import FormatError, ValidationError
from surs.mesh import (TriMesh, box, check_watertight, icosphere, load_mesh, normalize_to_unit,
                       save_mesh)

CUBE_OBJ = """# unit cube
v 0 0 0
v 1 0 0
v 0 1 0
v 1 1 0
v 0 0 1
v 1 0 1
v 0 1 1
v 1 1 1
f 1 3 2
f 2 3 4
f 5 6 7
f 6 8 7
f 1 2 5
f 2 6 5
f 3 7 4
f 4 7 8
f 1 5 3
f 3 5 7
f 2 4 6
f 4 8 6
"""


def test_load_cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    m = load_mesh(p)
    assert (m.n_vertices, m.n_faces) == (8, 12)
    assert check_watertight(m).ok


def test_out_of_range_index_rejected(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text(CUBE_OBJ + "f 1 2 9\n")
    with pytest.raises(ValidationError):
        load_mesh(p)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 x\n")
    with pytest.raises(FormatError) as e:
        load_mesh(p)
    assert e.value.line == 2


def test_non_finite_vertex_rejected(tmp_path):
    p = tmp_path / "nan.obj"
    p.write_text("v 0 0 nan\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(ValidationError):
        load_mesh(p)


def test_quads_are_fan_split(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_round_trip(tmp_path, sphere3):
    p = tmp_path / "s.obj"
    save_mesh(sphere3, p)
    m = load_mesh(p)
    np.testing.assert_array_equal(m.faces, sphere3.faces)
    assert np.max(np.abs(m.vertices - sphere3.vertices)) <= 1e-6


def test_ply_ascii_and_binary(tmp_path):
    b = box()
    head = ("ply\nformat {fmt} 1.0\nelement vertex 8\nproperty float x\nproperty float y\n"
            "property float z\nelement face 12\nproperty list uchar int vertex_indices\nend_header\n")
    asc = head.format(fmt="ascii") + "".join(f"{x} {y} {z}\n" for x, y, z in b.vertices) \
        + "".join(f"3 {a} {c} {d}\n" for a, c, d in b.faces)
    (tmp_path / "a.ply").write_text(asc)
    body = b.vertices.astype("<f4").tobytes() + b"".join(
        np.uint8(3).tobytes() + f.astype("<i4").tobytes() for f in b.faces)
    (tmp_path / "b.ply").write_bytes(head.format(fmt="binary_little_endian").encode() + body)
    for name in ("a.ply", "b.ply"):
        m = load_mesh(tmp_path / name)
        np.testing.assert_array_equal(m.faces, b.faces)
        np.testing.assert_allclose(m.vertices, b.vertices)


def test_normalize_cube():
    m, xf = normalize_to_unit(box((0, 0, 0), (2, 2, 2)))
    lo, hi = m.bounds()
    np.testing.assert_allclose(lo, -0.5)
    np.testing.assert_allclose(hi, 0.5)
    assert m.units_per_cm == pytest.approx(0.5)


def test_normalize_idempotent():
    m, _ = normalize_to_unit(box((0, 0, 0), (2, 1, 1)))
    m2, xf = normalize_to_unit(m)
    assert xf.is_identity()
    np.testing.assert_array_equal(m2.vertices, m.vertices)


def test_normalize_degenerate():
    with pytest.raises(ValidationError):
        normalize_to_unit(TriMesh(np.ones((3, 3)), [[0, 1, 2]]))


@given(arrays(np.float64, (12, 3), elements=st.floats(-50, 50)))
def test_normalize_inverse_round_trip(v):
    if np.ptp(v, axis=0).max() < 1e-3:
        return
    m = TriMesh(v, [[0, 1, 2]])
    n, xf = normalize_to_unit(m)
    assert np.max(np.ptp(n.vertices, axis=0)) == pytest.approx(1.0)
    np.testing.assert_allclose(xf.inverse(n.vertices), v, atol=1e-6)


def test_face_normals_are_unit(sphere3):
    n = sphere3.face_normals()
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    # outward
    c = sphere3.triangles().mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, c) > 0)


def test_icosphere_counts():
    s = icosphere(4)
    assert (s.n_vertices, s.n_faces) == (2562, 5120)
    assert check_watertight(s).ok


def test_watertight_detects_hole(sphere3):
    m = TriMesh(sphere3.vertices, sphere3.faces[1:])
    r = check_watertight(m)
    assert not r.closed and r.n_boundary_edges == 3


def test_mesh_arrays_read_only(sphere3):
    with pytest.raises(ValueError):
        sphere3.vertices[0, 0] = 1.0


def test_surface_samples_lie_on_faces(sphere3, rng):
    pts, fid = sphere3.sample_surface(500, rng)
    n = sphere3.face_normals()[fid]
    a = sphere3.triangles()[fid, 0]
    assert np.max(np.abs(np.einsum("ij,ij->i", pts - a, n))) < 1e-12
